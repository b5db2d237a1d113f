//! Randomised finite-difference cases, one function per operation. Each
//! returns the worst elementwise relative error for its seed.

use super::*;
use luvt_core::model::{BackboneConfig, BlockKind, ForwardMode, ModelParams};
use luvt_core::nn::{BatchNormMode, BnStats, Tensor};
use luvt_core::train::head_loss;
use luvt_core::Class;
use rand::Rng;

pub fn conv2d(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let c = r.random_range(1..=3);
    let f = r.random_range(1..=3);
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=k / 2);
    let hw = r.random_range(k.max(3)..=6);
    let x = rand_tensor(&mut r, &[2, c, hw, hw], 1.0);
    let w = rand_tensor(&mut r, &[f, c, k, k], 1.0);
    let b = rand_tensor(&mut r, &[f], 1.0);
    gradcheck(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
        project(g, y, seed)
    })
}

pub fn dense(seed: u64) -> f64 {
    let mut r = rng(200 + seed);
    let (n, din, dout) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=4));
    let x = rand_tensor(&mut r, &[n, din], 1.0);
    let w = rand_tensor(&mut r, &[din, dout], 1.0);
    let b = rand_tensor(&mut r, &[dout], 1.0);
    gradcheck(&[x, w, b], |g, v| {
        let y = g.dense(v[0], v[1], Some(v[2])).unwrap();
        let y = g.append_ones(y).unwrap();
        project(g, y, seed)
    })
}

pub fn relu(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let n = r.random_range(1..=30);
    let x = rand_tensor(&mut r, &[n], 1.0);
    gradcheck(&[x], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, seed)
    })
}

pub fn pooling(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let (c, h, w) = (r.random_range(1..=3), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
    let x = rand_tensor(&mut r, &[2, c, h, w], 1.0);
    gradcheck(&[x], |g, v| {
        let m = g.max_pool2x2(v[0]).unwrap();
        let a = g.global_avg_pool(m).unwrap();
        let b = g.global_avg_pool(v[0]).unwrap();
        let s = g.add(a, b).unwrap();
        project(g, s, seed)
    })
}

pub fn concat_channels(seed: u64) -> f64 {
    let mut r = rng(450 + seed);
    let (ca, cb) = (r.random_range(1..=3), r.random_range(1..=2));
    let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
    let a = rand_tensor(&mut r, &[2, ca, h, w], 1.0);
    let b = rand_tensor(&mut r, &[2, cb, h, w], 1.0);
    gradcheck(&[a, b], |g, v| {
        let c = g.concat_channels(v[0], v[1]).unwrap();
        let sq = g.mul(c, c).unwrap();
        project(g, sq, seed)
    })
}

/// Even seeds use training statistics, odd seeds running statistics.
pub fn batchnorm(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let c = r.random_range(1..=3);
    let shape = if seed % 4 < 2 { vec![3, c, 3, 2] } else { vec![4, c] };
    let x = rand_tensor(&mut r, &shape, 2.0);
    let gamma = rand_tensor(&mut r, &[c], 1.5);
    let beta = rand_tensor(&mut r, &[c], 1.0);
    let mode = if seed % 2 == 0 { BatchNormMode::Train } else { BatchNormMode::Inference };
    let mut init = BnStats::new(c);
    init.mean = rand_vec(&mut r, c, 0.5);
    init.var = rand_vec(&mut r, c, 0.5).iter().map(|v| 1.0 + v).collect();
    gradcheck(&[x, gamma, beta], |g, v| {
        let mut stats = init.clone();
        let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode).unwrap();
        project(g, y, seed)
    })
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let (n, k) = (r.random_range(1..=5), r.random_range(2..=4));
    let s = rand_tensor(&mut r, &[n, k], 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    gradcheck(&[s], |g, v| g.cross_entropy_mean(v[0], &labels).unwrap())
}

fn random_labels(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> (Vec<Class>, Vec<Option<[f64; 2]>>) {
    let labels: Vec<Class> = (0..n).map(|_| Class::from_index(r.random_range(0..2))).collect();
    let targets = labels
        .iter()
        .map(|c| (*c == Class::Defect).then(|| [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]))
        .collect();
    (labels, targets)
}

/// Both heads on random features, through the training objective.
pub fn head_objective(seed: u64) -> f64 {
    let mut r = rng(700 + seed);
    let n = r.random_range(1..=5);
    let feats = rand_tensor(&mut r, &[n, 3], 1.0);
    let wc = rand_tensor(&mut r, &[4, 2], 1.0);
    let wr = rand_tensor(&mut r, &[4, 2], 1.0);
    let (labels, targets) = random_labels(&mut r, n);
    gradcheck(&[feats, wc, wr], |g, v| {
        let psi = g.append_ones(v[0]).unwrap();
        let s = g.dense(psi, v[1], None).unwrap();
        let p = g.dense(psi, v[2], None).unwrap();
        head_loss(g, s, p, &labels, &targets).unwrap()
    })
}

/// The whole objective with respect to every model parameter of a small
/// network, alternating block kinds and coordinate channels.
pub fn full_objective(seed: u64) -> f64 {
    let mut r = rng(900 + seed);
    let config = BackboneConfig {
        widths: vec![2, 3, 2],
        blocks_per_stage: 1,
        block: if seed % 2 == 0 { BlockKind::Plain } else { BlockKind::Residual },
        input_size: 8,
        coord_channels: seed % 4 < 2,
    };
    let model = ModelParams::new(config, seed).unwrap();
    let n = 3;
    let x = Tensor::new(vec![n, 1, 8, 8], rand_vec(&mut r, n * 64, 1.0).iter().map(|v| 0.5 + 0.5 * v).collect())
        .unwrap();
    let (labels, targets) = random_labels(&mut r, n);
    let params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.tensor.cast()).collect();
    let stats: Vec<BnStats<f64>> = model.bn_stats.iter().map(|s| s.cast()).collect();
    gradcheck(&params, |g, v| {
        let input = g.leaf(x.clone());
        let mut bn = stats.clone();
        let out = model.forward(g, v, input, &mut bn, ForwardMode::Train).unwrap();
        head_loss(g, out.scores, out.locs, &labels, &targets).unwrap()
    })
}

/// Named case families for reporting.
pub const FAMILIES: [(&str, fn(u64) -> f64); 9] = [
    ("conv2d", conv2d),
    ("dense", dense),
    ("relu", relu),
    ("pooling", pooling),
    ("concat_channels", concat_channels),
    ("batchnorm", batchnorm),
    ("cross_entropy", cross_entropy),
    ("head_objective", head_objective),
    ("full_objective", full_objective),
];
