//! Synthetic laser-ultrasonic wave imaging and slim two-head defect detection.
//!
//! The crate is organised as a pipeline:
//!
//! 1. [`wavesim`]: explicit finite-difference simulation of a 2D scalar wave
//!    in a plate window with slit defects, rendered to 8-bit grayscale frames.
//! 2. [`dataset`]: automatic labeling, series-wise splits, coordinate-aware
//!    augmentation and the PGM/CSV on-disk format.
//! 3. [`nn`]: a small tape-based autodiff engine (convolution, pooling,
//!    batch normalisation, dense layers, losses) with Adam and freezing.
//! 4. [`model`]: CNN backbone producing a feature vector with an appended
//!    constant, followed by a linear classification head and a linear
//!    regression head.
//! 5. [`train`]: the joint classification + localisation objective,
//!    mini-batch training and the staged freeze schedule.
//! 6. [`eval`]: margin-based matching, precision/recall versus margin and
//!    single-image latency measurement.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;
pub mod wavesim;

pub use dataset::{Annotation, AugmentParams, Class, LabeledSeries, Sample, SplitConfig};
pub use error::{Error, Result};
pub use eval::{LatencyReport, MatchOutcome, MatchTag, PrPoint};
pub use model::{BackboneConfig, BlockKind, ModelParams, Prediction};
pub use nn::{Graph, Parameter, Scalar, Tensor, Var};
pub use train::{StageSchedule, TrainConfig, TrainReport, TrainableSet};
pub use wavesim::{DefectSpec, GrayImage, PlateSpec, Series, WaveField};
