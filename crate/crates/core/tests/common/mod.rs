#![allow(dead_code)]

use luvt_core::nn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely: the relative error of
/// a near-zero central difference is dominated by rounding, not by the op.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, scale)).unwrap()
}

/// Reduce any output to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let n: usize = g.shape(out).iter().product();
    let w = rand_vec(&mut rng(seed ^ 0x9e37_79b9), n, 1.0);
    let c = g.constant(g.shape(out).to_vec(), w).unwrap();
    let p = g.mul(out, c).unwrap();
    g.sum(p)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest elementwise relative error between the tape gradient and central
/// differences, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.data(l)[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub mod gradcases;
pub mod loss;
pub mod pr;
pub mod physics;
