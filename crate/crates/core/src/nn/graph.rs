use super::kernels::{col2im_add, im2col, max_pool2, ConvGeom};
use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Scalar>(&self) -> BnStats<U> {
        BnStats {
            mean: self.mean.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalise with batch statistics and fold them into the running stats.
    Train,
    /// Normalise with the running statistics; nothing is updated.
    Inference,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AppendOnes(Var),
    ConcatChannels(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    CrossEntropy {
        scores: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedSqErr {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        n_pos: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

fn grad_buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
}

/// Append-only tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Validation(format!("{op}: {detail}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.push(value, op)
    }

    /// Insert a tensor as an input. Its `requires_grad` flag decides whether
    /// a gradient is produced for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, data, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, data, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, data, &[a], Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.derived(vec![1], vec![s], &[a], Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, data, &[a], Op::Relu(a))
    }

    /// Cross-correlation of `x (N×C×H×W)` with `w (F×C×k×k)` plus optional
    /// per-filter bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("need 4-d input and weight, got {xs:?}, {ws:?}")));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} filters", self.shape(b), ws[0])));
            }
        }
        let (n, f) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {} too large for {xs:?}", ws[2])))?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let in_plane = xs[1] * xs[2] * xs[3];
        let mut out = vec![T::zero(); n * f * p];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * p }];
        let (xd, wd) = (self.data(x), self.data(w));
        for s in 0..n {
            let xin = &xd[s * in_plane..(s + 1) * in_plane];
            let dst = &mut out[s * f * p..(s + 1) * f * p];
            if geom.is_pointwise() {
                matmul(f, rows, p, wd, false, xin, false, dst, false);
            } else {
                im2col(xin, &geom, &mut cols);
                matmul(f, rows, p, wd, false, &cols, false, dst, false);
            }
            if let Some(b) = b {
                for (fi, &bv) in self.data(b).iter().enumerate() {
                    dst[fi * p..(fi + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(vec![n, f, geom.ho, geom.wo], out, &inputs, Op::Conv2d { x, w, b, geom }))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("max_pool2x2", format!("need N×C×H×W with H,W ≥ 2, got {xs:?}")));
        }
        let (out, argmax) = max_pool2(self.data(x), xs[0] * xs[1], xs[2], xs[3]);
        Ok(self.derived(
            vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2],
            out,
            &[x],
            Op::MaxPool2 { x, argmax },
        ))
    }

    /// `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("need N×C×H×W, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::of_f64(1.0 / hw as f64);
        let data = self.data(x).chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        Ok(self.derived(vec![xs[0], xs[1]], data, &[x], Op::GlobalAvgPool(x)))
    }

    /// `x (N×in) · w (in×out) + b (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("dense", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err("dense", format!("bias {:?} for {} outputs", self.shape(b), ws[1])));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * dout];
        matmul(n, din, dout, self.data(x), false, self.data(w), false, &mut out, false);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(vec![n, dout], out, &inputs, Op::Dense { x, w, b }))
    }

    /// `N×k → N×(k+1)`, last column fixed at one.
    pub fn append_ones(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("append_ones", format!("need N×k, got {xs:?}")));
        }
        let mut data = Vec::with_capacity(xs[0] * (xs[1] + 1));
        for row in self.data(x).chunks(xs[1].max(1)).take(xs[0]) {
            data.extend_from_slice(&row[..xs[1]]);
            data.push(T::one());
        }
        if xs[1] == 0 {
            data = vec![T::one(); xs[0]];
        }
        Ok(self.derived(vec![xs[0], xs[1] + 1], data, &[x], Op::AppendOnes(x)))
    }

    /// Stack `N×Ca×H×W` and `N×Cb×H×W` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 4 || bs.len() != 4 || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(shape_err("concat_channels", format!("{as_:?} vs {bs:?}")));
        }
        let (pa, pb) = (as_[1..].iter().product::<usize>(), bs[1..].iter().product::<usize>());
        let mut data = Vec::with_capacity(as_[0] * (pa + pb));
        for s in 0..as_[0] {
            data.extend_from_slice(&self.data(a)[s * pa..(s + 1) * pa]);
            data.extend_from_slice(&self.data(b)[s * pb..(s + 1) * pb]);
        }
        Ok(self.derived(
            vec![as_[0], as_[1] + bs[1], as_[2], as_[3]],
            data,
            &[a, b],
            Op::ConcatChannels(a, b),
        ))
    }

    /// Per-channel normalisation of `N×C` or `N×C×H×W`. In `Train` mode the
    /// batch statistics are used and blended into `stats`; in `Inference`
    /// mode `stats` is read only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(shape_err("batch_norm", format!("need rank 2 or 4, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err("batch_norm", format!("affine/stat parameters must have {c} channels")));
        }
        let m = n * hw;
        if mode == BatchNormMode::Train && m < 2 {
            return Err(shape_err("batch_norm", "training mode needs at least two values per channel".into()));
        }
        let eps = T::of_f64(BN_EPS);
        let xd = self.data(x);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let idx = |s: usize| s * c * hw + ch * hw;
            let (mean, var) = match mode {
                BatchNormMode::Train => {
                    let mut sum = T::zero();
                    for s in 0..n {
                        sum += xd[idx(s)..idx(s) + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / T::of_f64(m as f64);
                    let mut sq = T::zero();
                    for s in 0..n {
                        sq += xd[idx(s)..idx(s) + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    let var = sq / T::of_f64(m as f64);
                    let mom = T::of_f64(BN_MOMENTUM);
                    let unbiased = sq / T::of_f64((m - 1) as f64);
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
                    (mean, var)
                }
                BatchNormMode::Inference => (stats.mean[ch], stats.var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                for k in idx(s)..idx(s) + hw {
                    xhat[k] = (xd[k] - mean) * is;
                }
            }
        }
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let ch = (k / hw) % c;
                gd[ch] * v + bd[ch]
            })
            .collect();
        Ok(self.derived(
            xs,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
        ))
    }

    /// Mean over rows of `log Σ_j exp(s_j − s_label)`; labels are 0-based.
    pub fn cross_entropy_mean(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let ss = self.shape(scores).to_vec();
        if ss.len() != 2 || ss[0] != labels.len() || ss[0] == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("scores {ss:?} vs {} labels", labels.len()),
            ));
        }
        let k = ss[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let sd = self.data(scores);
        if sd.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("cross_entropy: non-finite scores"));
        }
        let mut probs = vec![T::zero(); sd.len()];
        let mut total = T::zero();
        for (r, (row, &label)) in sd.chunks(k).zip(labels).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            total += mx + z.ln() - row[label];
            for (j, &v) in row.iter().enumerate() {
                probs[r * k + j] = (v - mx).exp() / z;
            }
        }
        let value = total / T::of_f64(labels.len() as f64);
        Ok(self.derived(
            vec![1],
            vec![value],
            &[scores],
            Op::CrossEntropy {
                scores,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_{i: mask_i} ‖pred_i − target_i‖² / #mask`, or 0 with no masked rows.
    pub fn masked_sq_error(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 2 || ps[0] != mask.len() || target.len() != ps[0] * ps[1] {
            return Err(shape_err(
                "masked_sq_error",
                format!("pred {ps:?}, {} targets, {} mask entries", target.len(), mask.len()),
            ));
        }
        let d = ps[1];
        let n_pos = mask.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..d {
                let e = self.data(pred)[i * d + j] - target[i * d + j];
                total += e * e;
            }
        }
        let value = if n_pos == 0 { T::zero() } else { total / T::of_f64(n_pos as f64) };
        Ok(self.derived(
            vec![1],
            vec![value],
            &[pred],
            Op::MaskedSqErr {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                n_pos,
            },
        ))
    }

    /// Reverse-mode sweep from the scalar `loss`. Every node that depends on
    /// a `requires_grad` leaf gets its gradient stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.value.requires_grad {
                Some(g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].value.requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        grad_buf(grads, nodes, v).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                if needs(*a) {
                    let da = grad_buf(grads, nodes, *a);
                    for k in 0..g.len() {
                        da[k] += g[k] * bd[k];
                    }
                }
                if needs(*b) {
                    let db = grad_buf(grads, nodes, *b);
                    for k in 0..g.len() {
                        db[k] += g[k] * ad[k];
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    grad_buf(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *k);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    grad_buf(grads, nodes, *a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let ad = &nodes[a.0].value.data;
                    let da = grad_buf(grads, nodes, *a);
                    for k in 0..g.len() {
                        if ad[k] > T::zero() {
                            da[k] += g[k];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = &nodes[x.0].value.shape;
                let n = xs[0];
                let f = nodes[w.0].value.shape[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let in_plane = xs[1] * xs[2] * xs[3];
                let (xd, wd) = (&nodes[x.0].value.data, &nodes[w.0].value.data);
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = grad_buf(grads, nodes, b);
                    for s in 0..n {
                        for fi in 0..f {
                            let off = s * f * p + fi * p;
                            db[fi] += g[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                }
                if needs(*w) {
                    let dw = grad_buf(grads, nodes, *w);
                    let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * p }];
                    for s in 0..n {
                        let gout = &g[s * f * p..(s + 1) * f * p];
                        let xin = &xd[s * in_plane..(s + 1) * in_plane];
                        let c: &[T] = if geom.is_pointwise() {
                            xin
                        } else {
                            im2col(xin, geom, &mut cols);
                            &cols
                        };
                        matmul(f, p, rows, gout, false, c, true, dw, true);
                    }
                }
                if needs(*x) {
                    let dx = grad_buf(grads, nodes, *x);
                    let mut dcols = vec![T::zero(); rows * p];
                    for s in 0..n {
                        let gout = &g[s * f * p..(s + 1) * f * p];
                        let dxs = &mut dx[s * in_plane..(s + 1) * in_plane];
                        if geom.is_pointwise() {
                            matmul(rows, f, p, wd, true, gout, false, dxs, true);
                        } else {
                            matmul(rows, f, p, wd, true, gout, false, &mut dcols, false);
                            col2im_add(&dcols, geom, dxs);
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if needs(*x) {
                    let dx = grad_buf(grads, nodes, *x);
                    for (k, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[k];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs(*x) {
                    let xs = &nodes[x.0].value.shape;
                    let hw = xs[2] * xs[3];
                    let inv = T::of_f64(1.0 / hw as f64);
                    let dx = grad_buf(grads, nodes, *x);
                    for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xs = &nodes[x.0].value.shape;
                let (n, din) = (xs[0], xs[1]);
                let dout = nodes[w.0].value.shape[1];
                if needs(*x) {
                    matmul(n, dout, din, g, false, &nodes[w.0].value.data, true, grad_buf(grads, nodes, *x), true);
                }
                if needs(*w) {
                    matmul(din, n, dout, &nodes[x.0].value.data, true, g, false, grad_buf(grads, nodes, *w), true);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = grad_buf(grads, nodes, b);
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::AppendOnes(x) => {
                if needs(*x) {
                    let k = nodes[x.0].value.shape[1];
                    let dx = grad_buf(grads, nodes, *x);
                    for (r, row) in g.chunks(k + 1).enumerate() {
                        for j in 0..k {
                            dx[r * k + j] += row[j];
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let pa: usize = nodes[a.0].value.shape[1..].iter().product();
                let pb: usize = nodes[b.0].value.shape[1..].iter().product();
                for (v, off, len) in [(*a, 0, pa), (*b, pa, pb)] {
                    if needs(v) {
                        let d = grad_buf(grads, nodes, v);
                        for (s, row) in g.chunks(pa + pb).enumerate() {
                            for (k, gv) in row[off..off + len].iter().enumerate() {
                                d[s * len + k] += *gv;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = &nodes[x.0].value.shape;
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let m = T::of_f64((n * hw) as f64);
                let gd = &nodes[gamma.0].value.data;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = s * c * hw + ch * hw;
                        for k in off..off + hw {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if needs(*gamma) {
                    grad_buf(grads, nodes, *gamma).iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
                }
                if needs(*beta) {
                    grad_buf(grads, nodes, *beta).iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
                }
                if needs(*x) {
                    let dx = grad_buf(grads, nodes, *x);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = s * c * hw + ch * hw;
                            let scale = gd[ch] * inv_std[ch];
                            for k in off..off + hw {
                                dx[k] += if *batch_stats {
                                    scale / m * (m * g[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { scores, labels, probs } => {
                if needs(*scores) {
                    let k = nodes[scores.0].value.shape[1];
                    let scale = g[0] / T::of_f64(labels.len() as f64);
                    let ds = grad_buf(grads, nodes, *scores);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            ds[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::MaskedSqErr {
                pred,
                target,
                mask,
                n_pos,
            } => {
                if needs(*pred) && *n_pos > 0 {
                    let d = nodes[pred.0].value.shape[1];
                    let pd = &nodes[pred.0].value.data;
                    let scale = T::of_f64(2.0) * g[0] / T::of_f64(*n_pos as f64);
                    let dp = grad_buf(grads, nodes, *pred);
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..d {
                            dp[i * d + j] += scale * (pd[i * d + j] - target[i * d + j]);
                        }
                    }
                }
            }
        }
    }
}
