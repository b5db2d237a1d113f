//! Three-sample batch with fixed features and head weights, and its loss
//! evaluated by hand.

use luvt_core::nn::{Graph, Tensor};
use luvt_core::train::head_loss;
use luvt_core::Class;

pub const PSI: [[f64; 3]; 3] = [[0.5, -1.0, 1.0], [2.0, 0.25, 1.0], [-0.5, 1.5, 1.0]];
pub const W_C: [f64; 6] = [1.0, -0.5, 0.5, 0.25, 0.1, -0.2];
pub const W_R: [f64; 6] = [0.1, 0.05, -0.2, 0.1, 0.5, 0.4];
pub const LABELS: [Class; 3] = [Class::Defect, Class::NoDefect, Class::Defect];
pub const TARGETS: [Option<[f64; 2]>; 3] = [Some([0.6, 0.3]), None, Some([0.2, 0.9])];

/// Scores (0.1, -0.7), (2.225, -1.1375), (0.35, 0.425) give a mean CE of
/// 1.4996708635195255. Locations (0.75, 0.325) and (0.15, 0.525) against
/// the two targets give a mean squared error of 0.083125.
pub const HAND_LOSS: f64 = 1.5827958635195256;

/// Loss of fixed features through both heads, built on the training graph.
pub fn head_loss_of(psi: &[[f64; 3]], w_c: [f64; 6], w_r: [f64; 6], labels: &[Class], targets: &[Option<[f64; 2]>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let flat: Vec<f64> = psi.iter().flatten().copied().collect();
    let x = g.leaf(Tensor::new(vec![psi.len(), 3], flat).unwrap());
    let wc = g.leaf(Tensor::new(vec![3, 2], w_c.to_vec()).unwrap());
    let wr = g.leaf(Tensor::new(vec![3, 2], w_r.to_vec()).unwrap());
    let scores = g.dense(x, wc, None).unwrap();
    let locs = g.dense(x, wr, None).unwrap();
    let l = head_loss(&mut g, scores, locs, labels, targets).unwrap();
    g.data(l)[0]
}

pub fn three_sample_loss() -> f64 {
    head_loss_of(&PSI, W_C, W_R, &LABELS, &TARGETS)
}

/// Softmax negative log-likelihood written out directly.
pub fn softmax_nll(s: [f64; 2], class: usize) -> f64 {
    -(s[class].exp() / (s[0].exp() + s[1].exp())).ln()
}
