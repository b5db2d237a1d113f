//! Margin-based detection matching, precision/recall against the margin, and
//! single-image latency measurement.

use std::time::Instant;

use crate::dataset::{Annotation, Class};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchTag {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    pub tag: MatchTag,
    /// Localisation error when both prediction and truth are positive.
    pub distance_px: Option<f64>,
}

/// Classify one prediction against its annotation at margin `r` pixels. A
/// detection on a positive image that lands farther than `r` from the truth
/// is a false negative and nothing else.
pub fn match_prediction(pred: &Prediction, truth: &Annotation, r: f64) -> MatchOutcome {
    let detected = pred.predicted_class == Class::Defect;
    match truth.center_px {
        Some(c) => {
            let distance = detected.then(|| (pred.center_px.0 - c.0).hypot(pred.center_px.1 - c.1));
            let tag = match distance {
                Some(d) if d <= r => MatchTag::TruePositive,
                _ => MatchTag::FalseNegative,
            };
            MatchOutcome { tag, distance_px: distance }
        }
        None => MatchOutcome {
            tag: if detected {
                MatchTag::FalsePositive
            } else {
                MatchTag::TrueNegative
            },
            distance_px: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub r: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl PrPoint {
    pub fn from_counts(r: f64, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        PrPoint {
            r,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            tp,
            fp,
            fn_,
            tn,
        }
    }

    /// Harmonic mean of precision and recall (0 when both are 0).
    pub fn f_measure(&self) -> f64 {
        let s = self.precision + self.recall;
        if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }
}

/// One point per margin in `r_grid`.
pub fn pr_curve(preds: &[Prediction], truths: &[Annotation], r_grid: &[f64]) -> Result<Vec<PrPoint>> {
    if preds.len() != truths.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} annotations",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::validation("precision/recall needs at least one sample"));
    }
    if let Some(r) = r_grid.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::validation(format!("margin must be non-negative, got {r}")));
    }
    Ok(r_grid
        .iter()
        .map(|&r| {
            let mut c = [0usize; 4];
            for (p, t) in preds.iter().zip(truths) {
                c[match match_prediction(p, t, r).tag {
                    MatchTag::TruePositive => 0,
                    MatchTag::FalsePositive => 1,
                    MatchTag::FalseNegative => 2,
                    MatchTag::TrueNegative => 3,
                }] += 1;
            }
            PrPoint::from_counts(r, c[0], c[1], c[2], c[3])
        })
        .collect())
}

/// Margins 0, 5, …, 120 pixels at 224 px width, rescaled to `width`.
pub fn default_r_grid(width: usize) -> Vec<f64> {
    let k = width as f64 / 224.0;
    (0..=24).map(|i| 5.0 * i as f64 * k).collect()
}

pub const PR_HEADER: &str = "r,precision,recall,tp,fp,fn,tn";

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = format!("{PR_HEADER}\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.r, p.precision, p.recall, p.tp, p.fp, p.fn_, p.tn
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// One wall-clock observation per timed forward, in milliseconds.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub device: String,
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Short description of the machine the benchmark ran on.
pub fn device_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().replace(',', " "))
        })
        .unwrap_or_else(|| "unknown".into());
    format!("cpu {} {} ({model}) single-thread", std::env::consts::ARCH, std::env::consts::OS)
}

/// Time `reps` batch-size-1 forward passes after `warmup` untimed ones,
/// cycling through `images`.
pub fn latency_bench(params: &ModelParams, images: &[&[f32]], warmup: usize, reps: usize) -> Result<LatencyReport> {
    if reps < 10 {
        return Err(Error::validation(format!("latency benchmark needs at least 10 repetitions, got {reps}")));
    }
    if images.is_empty() {
        return Err(Error::validation("latency benchmark needs at least one image"));
    }
    for i in 0..warmup {
        std::hint::black_box(params.predict(images[i % images.len()])?);
    }
    let mut samples_ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let img = images[i % images.len()];
        let t = Instant::now();
        std::hint::black_box(params.predict(img)?);
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        median_ms: median(&sorted),
        p90_ms: quantile(&sorted, 0.9),
        samples_ms,
        warmup,
        batch_size: 1,
        device: device_descriptor(),
    })
}

pub const LATENCY_HEADER: &str = "label,reps,warmup,batch_size,median_ms,p90_ms,device";

pub fn latency_csv(rows: &[(String, LatencyReport)]) -> String {
    let mut out = format!("{LATENCY_HEADER}\n");
    for (label, r) in rows {
        out.push_str(&format!(
            "{label},{},{},{},{:.4},{:.4},{}\n",
            r.samples_ms.len(),
            r.warmup,
            r.batch_size,
            r.median_ms,
            r.p90_ms,
            r.device
        ));
    }
    out
}
