//! Convolutional backbone with a constant-augmented pooled feature vector and
//! two linear heads: class scores and a normalised defect position.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{join_list, write_kv, KvConfig};
use crate::dataset::Class;
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, write_checkpoint, BatchNormMode, BnStats, Graph, Parameter, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockKind {
    /// conv3x3 → BN → ReLU.
    #[default]
    Plain,
    /// Two conv3x3/BN layers with an identity or projected shortcut.
    Residual,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Plain => "plain",
            BlockKind::Residual => "residual",
        })
    }
}

impl FromStr for BlockKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(BlockKind::Plain),
            "residual" => Ok(BlockKind::Residual),
            other => Err(format!("unknown block type `{other}` (plain|residual)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub block: BlockKind,
    /// Square input side length in pixels.
    pub input_size: usize,
    /// Append normalised x and y coordinate planes to the grayscale input.
    pub coord_channels: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            block: BlockKind::Plain,
            input_size: 64,
            coord_channels: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::validation(format!("backbone widths must be non-empty and positive, got {:?}", self.widths)));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::validation("blocks_per_stage must be at least 1"));
        }
        let min = 1usize << self.widths.len();
        if self.input_size < min {
            return Err(Error::validation(format!(
                "input size {} too small for {} stride-2 stages",
                self.input_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Channels seen by the stem convolution.
    pub fn in_channels(&self) -> usize {
        if self.coord_channels {
            3
        } else {
            1
        }
    }

    /// Length of Ψ including the trailing constant.
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) + 1
    }

    /// Same layout with every stage width halved (at least 1).
    pub fn halved(&self) -> Self {
        BackboneConfig {
            widths: self.widths.iter().map(|w| (w / 2).max(1)).collect(),
            ..self.clone()
        }
    }

    pub fn take_from(cfg: &mut KvConfig, prefix: &str) -> Result<Self> {
        let d = BackboneConfig::default();
        let k = |name: &str| format!("{prefix}{name}");
        let c = BackboneConfig {
            widths: cfg.take_list(&k("widths"))?.unwrap_or(d.widths),
            blocks_per_stage: cfg.take_or(&k("blocks_per_stage"), d.blocks_per_stage)?,
            block: cfg.take_or(&k("block"), d.block)?,
            input_size: cfg.take_or(&k("input_size"), d.input_size)?,
            coord_channels: cfg.take_or(&k("coord_channels"), d.coord_channels)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_config_string(&self) -> String {
        write_kv([
            ("widths", join_list(&self.widths)),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("block", self.block.to_string()),
            ("input_size", self.input_size.to_string()),
            ("coord_channels", self.coord_channels.to_string()),
        ])
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Backbone stage; the stem counts as stage 0.
    Stage(usize),
    Head,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    w: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    stride: usize,
    pad: usize,
    stage: usize,
}

#[derive(Debug, Clone)]
enum Unit {
    Plain(ConvBn),
    Residual {
        a: ConvBn,
        b: ConvBn,
        proj: Option<ConvBn>,
    },
}

/// Backbone parameters θ, head matrices `W_c`, `W_r` (both d×2) and
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: BackboneConfig,
    pub params: Vec<Parameter<f32>>,
    pub groups: Vec<ParamGroup>,
    pub bn_names: Vec<String>,
    pub bn_stats: Vec<BnStats<f32>>,
    stem: ConvBn,
    units: Vec<Unit>,
    w_c: usize,
    w_r: usize,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `N×d` features, last column 1.
    pub psi: Var,
    /// `N×2` class scores (defect, no defect).
    pub scores: Var,
    /// `N×2` normalised (x, y).
    pub locs: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics for every stage that is not frozen.
    Train,
    /// Running statistics everywhere.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: [f32; 2],
    pub predicted_class: Class,
    /// Softmax probability of the predicted class.
    pub probability: f64,
    /// Pixel coordinates; meaningful when the class is [`Class::Defect`].
    pub center_px: (f64, f64),
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter<f32>>,
    groups: Vec<ParamGroup>,
    bn_names: Vec<String>,
    bn_stats: Vec<BnStats<f32>>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor<f32>, group: ParamGroup) -> usize {
        self.params.push(Parameter::new(name, t));
        self.groups.push(group);
        self.params.len() - 1
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, stage: usize) -> ConvBn {
        let group = ParamGroup::Stage(stage);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let wt = self.normal(vec![cout, cin, k, k], std);
        let w = self.push(format!("{name}.conv.w"), wt, group);
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(vec![cout], 1.0), group);
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(vec![cout]), group);
        self.bn_names.push(format!("{name}.bn"));
        self.bn_stats.push(BnStats::new(cout));
        ConvBn {
            w,
            gamma,
            beta,
            stats: self.bn_stats.len() - 1,
            stride,
            pad: k / 2,
            stage,
        }
    }
}

fn shape_error(msg: String) -> Error {
    Error::Validation(msg)
}

impl ModelParams {
    /// He-normal convolutions, unit batch norm, small random heads whose
    /// constant row starts at zero scores and the image centre.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            groups: Vec::new(),
            bn_names: Vec::new(),
            bn_stats: Vec::new(),
        };
        let stem = b.conv_bn("stem", config.in_channels(), config.widths[0], 3, 2, 0);
        let mut units = Vec::new();
        let mut cin = config.widths[0];
        for (s, &width) in config.widths.iter().enumerate() {
            for blk in 0..config.blocks_per_stage {
                let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{blk}");
                units.push(match config.block {
                    BlockKind::Plain => Unit::Plain(b.conv_bn(&name, cin, width, 3, stride, s)),
                    BlockKind::Residual => {
                        let a = b.conv_bn(&format!("{name}.a"), cin, width, 3, stride, s);
                        let bb = b.conv_bn(&format!("{name}.b"), width, width, 3, 1, s);
                        let proj = (stride != 1 || cin != width)
                            .then(|| b.conv_bn(&format!("{name}.proj"), cin, width, 1, stride, s));
                        Unit::Residual { a, b: bb, proj }
                    }
                });
                cin = width;
            }
        }
        let d = config.feature_dim();
        let mut wc = b.normal(vec![d, 2], 0.01);
        let mut wr = b.normal(vec![d, 2], 0.01);
        for j in 0..2 {
            wc.data[(d - 1) * 2 + j] = 0.0;
            wr.data[(d - 1) * 2 + j] = 0.5;
        }
        let w_c = b.push("head.cls.w".into(), wc, ParamGroup::Head);
        let w_r = b.push("head.reg.w".into(), wr, ParamGroup::Head);
        Ok(ModelParams {
            config,
            params: b.params,
            groups: b.groups,
            bn_names: b.bn_names,
            bn_stats: b.bn_stats,
            stem,
            units,
            w_c,
            w_r,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_stages(&self) -> usize {
        self.config.widths.len()
    }

    pub fn w_c(&self) -> &Tensor<f32> {
        &self.params[self.w_c].tensor
    }

    pub fn w_r(&self) -> &Tensor<f32> {
        &self.params[self.w_r].tensor
    }

    /// Mark each parameter frozen unless `trainable` accepts its group.
    pub fn set_trainable(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        for (p, &g) in self.params.iter_mut().zip(&self.groups) {
            p.frozen = !trainable(g);
        }
    }

    fn stage_frozen(&self, stage: usize) -> bool {
        self.params
            .iter()
            .zip(&self.groups)
            .filter(|(_, &g)| g == ParamGroup::Stage(stage))
            .all(|(p, _)| p.frozen)
    }

    /// Stack `[0,1]` grayscale images (row-major, `input_size²` each) into an
    /// `N×1×H×W` batch.
    pub fn input_batch(&self, images: &[&[f32]]) -> Result<Tensor<f32>> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for (i, img) in images.iter().enumerate() {
            if img.len() != s * s {
                return Err(shape_error(format!(
                    "image {i} has {} pixels, model expects {s}x{s}",
                    img.len()
                )));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("image {i} has non-finite pixels")));
            }
            data.extend_from_slice(img);
        }
        Tensor::new(vec![images.len(), 1, s, s], data)
    }

    /// Insert every parameter as a graph leaf, cast to `T`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.graph_input().cast())).collect()
    }

    /// Forward pass from an input batch to Ψ, scores and locations. `bn`
    /// holds the running statistics to use and, in training mode, update.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        bn: &mut [BnStats<T>],
        mode: ForwardMode,
    ) -> Result<ForwardVars> {
        let s = self.config.input_size;
        let expect = [1, s, s];
        if g.shape(x).len() != 4 || g.shape(x)[1..] != expect {
            return Err(shape_error(format!(
                "input batch {:?} does not match N×{:?}",
                g.shape(x),
                expect
            )));
        }
        let frozen: Vec<bool> = (0..self.num_stages()).map(|st| self.stage_frozen(st)).collect();
        let apply = |g: &mut Graph<T>, l: &ConvBn, x: Var, bn: &mut [BnStats<T>], relu: bool| -> Result<Var> {
            let m = if mode == ForwardMode::Train && !frozen[l.stage] {
                BatchNormMode::Train
            } else {
                BatchNormMode::Inference
            };
            let h = g.conv2d(x, vars[l.w], None, l.stride, l.pad)?;
            let h = g.batch_norm(h, vars[l.gamma], vars[l.beta], &mut bn[l.stats], m)?;
            Ok(if relu { g.relu(h) } else { h })
        };
        let x = if self.config.coord_channels { with_coords(g, x)? } else { x };
        let mut h = apply(g, &self.stem, x, bn, true)?;
        for unit in &self.units {
            h = match unit {
                Unit::Plain(l) => apply(g, l, h, bn, true)?,
                Unit::Residual { a, b, proj } => {
                    let main = apply(g, a, h, bn, true)?;
                    let main = apply(g, b, main, bn, false)?;
                    let short = match proj {
                        Some(p) => apply(g, p, h, bn, false)?,
                        None => h,
                    };
                    let sum = g.add(main, short)?;
                    g.relu(sum)
                }
            };
        }
        let pooled = g.global_avg_pool(h)?;
        let psi = g.append_ones(pooled)?;
        let scores = g.dense(psi, vars[self.w_c], None)?;
        let locs = g.dense(psi, vars[self.w_r], None)?;
        Ok(ForwardVars { psi, scores, locs })
    }

    /// Inference-mode forward returning `(Ψ, scores, locations)` per image.
    pub fn run(&self, images: &[&[f32]]) -> Result<Vec<(Vec<f32>, [f32; 2], [f32; 2])>> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g);
        let x = g.leaf(self.input_batch(images)?);
        let mut bn = self.bn_stats.clone();
        let out = self.forward(&mut g, &vars, x, &mut bn, ForwardMode::Inference)?;
        let d = self.feature_dim();
        Ok((0..images.len())
            .map(|i| {
                let psi = g.data(out.psi)[i * d..(i + 1) * d].to_vec();
                let sc = g.data(out.scores);
                let lc = g.data(out.locs);
                (psi, [sc[2 * i], sc[2 * i + 1]], [lc[2 * i], lc[2 * i + 1]])
            })
            .collect())
    }

    /// Ψ(I; θ) for a single image.
    pub fn extract_features(&self, image: &[f32]) -> Result<Vec<f32>> {
        Ok(self.run(&[image])?.remove(0).0)
    }

    pub fn predict(&self, image: &[f32]) -> Result<Prediction> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    pub fn predict_batch(&self, images: &[&[f32]]) -> Result<Vec<Prediction>> {
        let side = self.config.input_size;
        Ok(self
            .run(images)?
            .into_iter()
            .map(|(_, scores, loc)| prediction_from(scores, loc, side, side))
            .collect())
    }

    /// Named tensors in checkpoint order: parameters, then running stats.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), Tensor::new(p.tensor.shape.clone(), p.tensor.data.clone()).unwrap()))
            .collect();
        for (name, st) in self.bn_names.iter().zip(&self.bn_stats) {
            let c = st.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(vec![c], st.mean.clone()).unwrap()));
            out.push((format!("{name}.running_var"), Tensor::new(vec![c], st.var.clone()).unwrap()));
        }
        out
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let named = self.named_tensors();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, named.iter().map(|(n, t)| (n.as_str(), t))).expect("writing to memory");
        buf
    }

    /// Overwrite values from checkpoint entries; every tensor must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut map: std::collections::HashMap<String, Tensor<f32>> = entries.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::validation(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape != shape {
                return Err(Error::validation(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data)
        };
        for p in &mut self.params {
            p.tensor.data = take(&p.name, &p.tensor.shape)?;
        }
        for (name, st) in self.bn_names.iter().zip(&mut self.bn_stats) {
            let c = [st.mean.len()];
            st.mean = take(&format!("{name}.running_mean"), &c)?;
            st.var = take(&format!("{name}.running_var"), &c)?;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::validation(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Path of the hyperparameter file written next to a checkpoint.
    pub fn sidecar_path(ckpt: &Path) -> PathBuf {
        ckpt.with_extension("model")
    }

    /// Write the checkpoint and its `key = value` hyperparameter sidecar.
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        fs::write(ckpt, self.checkpoint_bytes()).map_err(|e| Error::io(ckpt, e))?;
        let side = Self::sidecar_path(ckpt);
        fs::write(&side, self.config.to_config_string()).map_err(|e| Error::io(&side, e))
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let side = Self::sidecar_path(ckpt);
        let mut cfg = KvConfig::from_file(&side)?;
        let config = BackboneConfig::take_from(&mut cfg, "")?;
        cfg.finish()?;
        let mut model = ModelParams::new(config, 0)?;
        let bytes = fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
        let entries = read_checkpoint(&bytes[..]).map_err(|e| match e {
            Error::Validation(msg) => Error::Parse {
                path: ckpt.to_path_buf(),
                line: 0,
                msg,
            },
            other => other,
        })?;
        model.load_tensors(entries)?;
        Ok(model)
    }
}

/// Append x and y planes, each running 0 to 1 across the map.
fn with_coords<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, h, w) = (g.shape(x)[0], g.shape(x)[2], g.shape(x)[3]);
    let (nx, ny) = ((w.max(2) - 1) as f64, (h.max(2) - 1) as f64);
    let mut plane = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        plane.extend((0..w).map(|i| T::of_f64(i as f64 / nx)));
    }
    for j in 0..h {
        plane.extend(std::iter::repeat_n(T::of_f64(j as f64 / ny), w));
    }
    let data = plane.repeat(n);
    let c = g.constant(vec![n, 2, h, w], data)?;
    g.concat_channels(x, c)
}

/// `(W_c)ᵀ Ψ` for a `d×2` matrix stored row-major.
pub fn classify<T: Scalar>(psi: &[T], w_c: &Tensor<T>) -> Result<[T; 2]> {
    head(psi, w_c)
}

/// `(W_r)ᵀ Ψ`, normalised image coordinates.
pub fn localize<T: Scalar>(psi: &[T], w_r: &Tensor<T>) -> Result<[T; 2]> {
    head(psi, w_r)
}

fn head<T: Scalar>(psi: &[T], w: &Tensor<T>) -> Result<[T; 2]> {
    if w.shape != [psi.len(), 2] {
        return Err(shape_error(format!(
            "head weight {:?} does not match feature length {}",
            w.shape,
            psi.len()
        )));
    }
    let mut out = [T::zero(); 2];
    for (i, &p) in psi.iter().enumerate() {
        out[0] += p * w.data[2 * i];
        out[1] += p * w.data[2 * i + 1];
    }
    Ok(out)
}

/// Normalised `[0,1]` coordinates to pixels (`0 … size−1`).
pub fn to_pixels(loc: [f32; 2], width: usize, height: usize) -> (f64, f64) {
    (
        loc[0] as f64 * (width.max(1) - 1) as f64,
        loc[1] as f64 * (height.max(1) - 1) as f64,
    )
}

/// Argmax with ties going to the defect class.
pub fn prediction_from(scores: [f32; 2], loc: [f32; 2], width: usize, height: usize) -> Prediction {
    let (s1, s2) = (scores[0] as f64, scores[1] as f64);
    let predicted_class = if s1 >= s2 { Class::Defect } else { Class::NoDefect };
    let m = s1.max(s2);
    let (e1, e2) = ((s1 - m).exp(), (s2 - m).exp());
    let p1 = e1 / (e1 + e2);
    Prediction {
        scores,
        predicted_class,
        probability: if predicted_class == Class::Defect { p1 } else { 1.0 - p1 },
        center_px: to_pixels(loc, width, height),
    }
}
