//! Hand-counted precision/recall fixture and randomised invariants.

use luvt_core::eval::{default_r_grid, pr_curve};
use luvt_core::model::prediction_from;
use luvt_core::{Annotation, Class, Prediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn pred(class: Class, x: f64, y: f64) -> Prediction {
    let scores = if class == Class::Defect { [2.0, 0.0] } else { [0.0, 2.0] };
    let mut p = prediction_from(scores, [0.0, 0.0], 64, 64);
    p.center_px = (x, y);
    p
}

/// Detections 0, 5 and 10 px off, one missed positive, one false alarm and
/// one correct rejection.
pub fn fixture() -> (Vec<Prediction>, Vec<Annotation>) {
    let preds = vec![
        pred(Class::Defect, 10.0, 10.0),
        pred(Class::Defect, 23.0, 24.0),
        pred(Class::Defect, 46.0, 48.0),
        pred(Class::NoDefect, 0.0, 0.0),
        pred(Class::Defect, 30.0, 30.0),
        pred(Class::NoDefect, 0.0, 0.0),
    ];
    let truths = vec![
        Annotation::defect(10.0, 10.0),
        Annotation::defect(20.0, 20.0),
        Annotation::defect(40.0, 40.0),
        Annotation::defect(5.0, 5.0),
        Annotation::no_defect(),
        Annotation::no_defect(),
    ];
    (preds, truths)
}

/// `(tp, fp, fn, tn)` of the fixture, counted by hand.
pub fn fixture_counts(r: f64) -> (usize, usize, usize, usize) {
    let tp = 1 + (r >= 5.0) as usize + (r >= 10.0) as usize;
    (tp, 1, 4 - tp, 1)
}

/// Compare the fixture against the hand count at every margin of `grid`.
pub fn check_fixture(grid: &[f64]) -> Result<(), String> {
    let (preds, truths) = fixture();
    let curve = pr_curve(&preds, &truths, grid).map_err(|e| e.to_string())?;
    for p in curve {
        let got = (p.tp, p.fp, p.fn_, p.tn);
        if got != fixture_counts(p.r) {
            return Err(format!("r={}: counts {got:?}, expected {:?}", p.r, fixture_counts(p.r)));
        }
        let (tp, fp, fn_, _) = got;
        let (prec, rec) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
        if (p.precision - prec).abs() > 1e-12 || (p.recall - rec).abs() > 1e-12 {
            return Err(format!("r={}: P/R ({}, {}) vs ({prec}, {rec})", p.r, p.precision, p.recall));
        }
    }
    Ok(())
}

/// Monotonicity in the margin and count conservation over `sets` random
/// prediction sets on the default 64 px grid.
pub fn check_random_sets(sets: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = default_r_grid(64);
    for k in 0..sets {
        let n = rng.random_range(1..40);
        let mut preds = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for _ in 0..n {
            let class = if rng.random_bool(0.5) { Class::Defect } else { Class::NoDefect };
            preds.push(pred(class, rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)));
            truths.push(if rng.random_bool(0.5) {
                Annotation::defect(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))
            } else {
                Annotation::no_defect()
            });
        }
        let positives = truths.iter().filter(|t| t.label == Class::Defect).count();
        let curve = pr_curve(&preds, &truths, &grid).map_err(|e| e.to_string())?;
        for p in &curve {
            if p.tp + p.fp + p.fn_ + p.tn != n || p.tp + p.fn_ != positives || p.fp != curve[0].fp {
                return Err(format!("set {k}: counts not conserved at r={}", p.r));
            }
        }
        for w in curve.windows(2) {
            if w[1].tp < w[0].tp || w[1].precision < w[0].precision || w[1].recall < w[0].recall {
                return Err(format!("set {k}: curve decreases between r={} and r={}", w[0].r, w[1].r));
            }
        }
    }
    Ok(())
}
