//! The flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use luvt_core::config::KvConfig;
use luvt_core::dataset::CorpusConfig;
use luvt_core::{BackboneConfig, PlateSpec, Result, SplitConfig, TrainConfig};

/// Every knob of a run. Keys are grouped by prefix: `plate.`, `corpus.`,
/// `split.`, `model.`, `train.`, `eval.` and `bench.`; `seed` is required.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub plate: PlateSpec,
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    /// Margins in pixels; defaults to the standard grid for the input size.
    pub r_grid: Option<Vec<f64>>,
    /// Checkpoint for `evaluate`, `predict` and `bench`; defaults to the
    /// selected checkpoint under the output root.
    pub checkpoint: Option<PathBuf>,
    pub bench_reps: usize,
    pub bench_warmup: usize,
}

impl RunConfig {
    /// Read `path` (if any), apply `--set` overrides and `--seed`, and
    /// consume every key. Leftover keys are an error.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => KvConfig::from_file(p)?,
            None => KvConfig::default(),
        };
        for o in overrides {
            cfg.set_override(o)?;
        }
        if let Some(s) = seed {
            cfg.set("seed", s);
        }
        Self::from_kv(cfg)
    }

    pub fn from_kv(mut cfg: KvConfig) -> Result<Self> {
        let seed: u64 = cfg.require("seed")?;
        // Simulation and training follow the run seed unless set explicitly.
        for key in ["plate.seed", "train.seed"] {
            if !cfg.contains(key) {
                cfg.set(key, seed);
            }
        }
        let plate = PlateSpec::take_from(&mut cfg, "plate.")?;
        plate.validate()?;
        let run = RunConfig {
            seed,
            plate,
            corpus: CorpusConfig::take_from(&mut cfg, "corpus.")?,
            split: SplitConfig::take_from(&mut cfg, "split.")?,
            model: BackboneConfig::take_from(&mut cfg, "model.")?,
            train: TrainConfig::take_from(&mut cfg, "train.")?,
            r_grid: cfg.take_list("eval.r_grid")?,
            checkpoint: cfg.take("eval.checkpoint")?,
            bench_reps: cfg.take_or("bench.reps", 200)?,
            bench_warmup: cfg.take_or("bench.warmup", 20)?,
        };
        cfg.finish()?;
        Ok(run)
    }
}
