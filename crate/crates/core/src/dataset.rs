//! Labelled samples: automatic labelling of simulated series, series-wise
//! splits, coordinate-consistent augmentation and on-disk PGM/CSV series.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{join_list, KvConfig};
use crate::error::{Error, Result};
use crate::wavesim::{simulate_series, DefectSpec, GrayImage, PlateSpec, Series};

/// Binary class; the numeric values are the on-disk labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Defect = 1,
    NoDefect = 2,
}

impl Class {
    pub fn label(self) -> u8 {
        self as u8
    }

    /// Zero-based index into a score vector.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Class::Defect
        } else {
            Class::NoDefect
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub label: Class,
    /// Defect centre in pixels (origin top-left, y down); present iff the
    /// label is [`Class::Defect`].
    pub center_px: Option<(f64, f64)>,
}

impl Annotation {
    pub fn defect(x: f64, y: f64) -> Self {
        Annotation {
            label: Class::Defect,
            center_px: Some((x, y)),
        }
    }

    pub fn no_defect() -> Self {
        Annotation {
            label: Class::NoDefect,
            center_px: None,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        match (self.label, self.center_px) {
            (Class::NoDefect, None) => Ok(()),
            (Class::NoDefect, Some(_)) => Err(Error::validation("no-defect annotation carries a centre")),
            (Class::Defect, None) => Err(Error::validation("defect annotation lacks a centre")),
            (Class::Defect, Some(c)) if in_bounds(c, width, height) => Ok(()),
            (Class::Defect, Some(c)) => Err(Error::validation(format!(
                "defect centre {c:?} outside {width}x{height} image"
            ))),
        }
    }
}

fn in_bounds(c: (f64, f64), width: usize, height: usize) -> bool {
    (0.0..=(width as f64 - 1.0)).contains(&c.0) && (0.0..=(height as f64 - 1.0)).contains(&c.1)
}

/// One model input with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major grayscale in `[0, 1]`.
    pub image: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub annotation: Annotation,
    pub series_id: u32,
    pub frame_index: usize,
}

impl Sample {
    /// Convert a frame to `[0,1]` floats, resizing to `size×size` when the
    /// frame differs (the centre is mapped with the same transform).
    pub fn from_frame(frame: &GrayImage, annotation: Annotation, size: usize, series_id: u32, frame_index: usize) -> Self {
        let image: Vec<f32> = frame.to_unit();
        let mut sample = Sample {
            image,
            width: frame.width,
            height: frame.height,
            annotation,
            series_id,
            frame_index,
        };
        if frame.width != size || frame.height != size {
            let sx = size as f64 / frame.width as f64;
            let sy = size as f64 / frame.height as f64;
            let m = Affine([sx, 0.0, 0.5 * sx - 0.5, 0.0, sy, 0.5 * sy - 0.5]);
            sample.image = warp(&sample.image, frame.width, frame.height, size, size, &m, 0.0);
            sample.width = size;
            sample.height = size;
            sample.annotation.center_px = annotation.center_px.map(|c| m.apply(c));
        }
        sample
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub id: u32,
    pub frames: Vec<GrayImage>,
    pub annotations: Vec<Annotation>,
}

impl LabeledSeries {
    pub fn samples(&self, size: usize) -> Vec<Sample> {
        self.frames
            .iter()
            .zip(&self.annotations)
            .enumerate()
            .map(|(i, (f, a))| Sample::from_frame(f, *a, size, self.id, i))
            .collect()
    }

    pub fn positives(&self) -> usize {
        self.annotations.iter().filter(|a| a.label == Class::Defect).count()
    }
}

/// Default visibility threshold on relative scattered energy.
pub const DEFAULT_VISIBILITY: f64 = 0.01;

/// A frame is positive once the incident wave has reached a slit and while
/// the scattered field still carries at least `eps_vis` relative energy.
pub fn auto_label(series: &Series, spec: &PlateSpec, eps_vis: f64) -> Result<Vec<Annotation>> {
    if series.meta.len() != series.frames.len() {
        return Err(Error::validation(format!(
            "series has {} frames but {} metadata records",
            series.frames.len(),
            series.meta.len()
        )));
    }
    if series.defects.len() != spec.defects.len() {
        return Err(Error::validation("series defect records do not match the plate spec"));
    }
    let Some(truth) = series.defects.first() else {
        return Ok(vec![Annotation::no_defect(); series.frames.len()]);
    };
    series
        .meta
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let energy = m
                .scattered_energy
                .ok_or_else(|| Error::validation(format!("frame {i} lacks scattered-energy metadata")))?;
            let arrived = series.defects.iter().any(|d| m.step >= d.arrival_step);
            Ok(if arrived && energy >= eps_vis {
                Annotation::defect(truth.center_px.0, truth.center_px.1)
            } else {
                Annotation::no_defect()
            })
        })
        .collect()
}

/// Series ids assigned to each subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    pub train_series: Vec<u32>,
    pub val_series: Vec<u32>,
    pub test_series: Vec<u32>,
}

/// The defect-free plate, the four corners and the right edge train; the centre and
/// lower middle test, so every test position lies inside the trained region.
impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_series: vec![1, 3, 6, 7, 9, 10],
            val_series: vec![4, 5],
            test_series: vec![2, 8],
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let sets = [
            ("train", &self.train_series),
            ("val", &self.val_series),
            ("test", &self.test_series),
        ];
        let mut seen = HashMap::new();
        for (name, ids) in sets {
            if ids.is_empty() {
                return Err(Error::validation(format!("split: {name} subset is empty")));
            }
            for &id in ids {
                if let Some(prev) = seen.insert(id, name) {
                    return Err(Error::validation(format!("split: series {id} is listed in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn take_from(cfg: &mut KvConfig, prefix: &str) -> Result<Self> {
        let d = SplitConfig::default();
        let k = |n: &str| format!("{prefix}{n}");
        let s = SplitConfig {
            train_series: cfg.take_list(&k("train"))?.unwrap_or(d.train_series),
            val_series: cfg.take_list(&k("val"))?.unwrap_or(d.val_series),
            test_series: cfg.take_list(&k("test"))?.unwrap_or(d.test_series),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_config_string(&self) -> String {
        crate::config::write_kv([
            ("train", join_list(&self.train_series)),
            ("val", join_list(&self.val_series)),
            ("test", join_list(&self.test_series)),
        ])
    }
}

pub type Split = (Vec<LabeledSeries>, Vec<LabeledSeries>, Vec<LabeledSeries>);

/// Partition whole series into train/val/test. Every series must be assigned
/// exactly once and every referenced id must exist.
pub fn split_by_series(all: Vec<LabeledSeries>, cfg: &SplitConfig) -> Result<Split> {
    cfg.validate()?;
    let mut by_id: HashMap<u32, LabeledSeries> = HashMap::new();
    for s in all {
        let id = s.id;
        if by_id.insert(id, s).is_some() {
            return Err(Error::validation(format!("split: duplicate series id {id}")));
        }
    }
    let mut take = |ids: &[u32]| -> Result<Vec<LabeledSeries>> {
        ids.iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .ok_or_else(|| Error::validation(format!("split: series {id} not found")))
            })
            .collect()
    };
    let train = take(&cfg.train_series)?;
    let val = take(&cfg.val_series)?;
    let test = take(&cfg.test_series)?;
    if !by_id.is_empty() {
        let left: BTreeSet<u32> = by_id.keys().copied().collect();
        return Err(Error::validation(format!("split: series {left:?} not assigned to any subset")));
    }
    Ok((train, val, test))
}

/// One entry of the standard ten-series corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub id: u32,
    pub position: &'static str,
    pub defect: Option<DefectSpec>,
}

/// Ten series over an 80×80 mm scan: one defect-free plate and a 20 mm slit
/// at nine positions (probe at the top edge).
pub fn standard_layout() -> Vec<LayoutEntry> {
    let (l, c, r) = (20.0, 40.0, 60.0);
    let (up, mid, low) = (22.0, 40.0, 58.0);
    let entries: [(&str, Option<(f64, f64)>); 10] = [
        ("no defect", None),
        ("center", Some((c, mid))),
        ("right", Some((r, mid))),
        ("left", Some((l, mid))),
        ("upper", Some((c, up))),
        ("upper right", Some((r, up))),
        ("upper left", Some((l, up))),
        ("lower", Some((c, low))),
        ("lower right", Some((r, low))),
        ("lower left", Some((l, low))),
    ];
    entries
        .into_iter()
        .enumerate()
        .map(|(i, (position, at))| LayoutEntry {
            id: i as u32 + 1,
            position,
            defect: at.map(|(x, y)| DefectSpec::slit_at(x, y)),
        })
        .collect()
}

/// Length and labelling of simulated series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub n_snapshots: usize,
    pub stride: usize,
    pub visibility: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_snapshots: 128,
            stride: 3,
            visibility: DEFAULT_VISIBILITY,
        }
    }
}

impl CorpusConfig {
    pub fn take_from(cfg: &mut KvConfig, prefix: &str) -> Result<Self> {
        let d = CorpusConfig::default();
        let c = CorpusConfig {
            n_snapshots: cfg.take_or(&format!("{prefix}snapshots"), d.n_snapshots)?,
            stride: cfg.take_or(&format!("{prefix}stride"), d.stride)?,
            visibility: cfg.take_or(&format!("{prefix}visibility"), d.visibility)?,
        };
        if c.n_snapshots == 0 || c.stride == 0 || !(c.visibility >= 0.0) {
            return Err(Error::validation("corpus: snapshots and stride must be positive, visibility non-negative"));
        }
        Ok(c)
    }
}

/// Simulate and label one layout entry. Each series gets its own noise seed.
pub fn simulate_entry(base: &PlateSpec, entry: &LayoutEntry, corpus: &CorpusConfig) -> Result<LabeledSeries> {
    let spec = PlateSpec {
        defects: entry.defect.iter().cloned().collect(),
        seed: base.seed.wrapping_add(entry.id as u64),
        ..base.clone()
    };
    let series = simulate_series(&spec, corpus.n_snapshots, corpus.stride)?;
    let annotations = auto_label(&series, &spec, corpus.visibility)?;
    Ok(LabeledSeries {
        id: entry.id,
        frames: series.frames,
        annotations,
    })
}

pub fn simulate_corpus(base: &PlateSpec, corpus: &CorpusConfig) -> Result<Vec<LabeledSeries>> {
    standard_layout()
        .iter()
        .map(|e| simulate_entry(base, e, corpus))
        .collect()
}

// ---------------------------------------------------------------------------
// Augmentation

/// Ranges for random augmentation. Each transform fires with probability
/// `prob`; a zero range disables it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Maximum shift as a fraction of the image size, per axis.
    pub shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotate_deg: f64,
    /// Smallest crop side as a fraction of the image (1 disables cropping).
    pub crop_min: f64,
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Gamma range standing in for saturation on grayscale input.
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Upper bound of the Gaussian noise standard deviation.
    pub noise_sigma: f64,
    pub prob: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            shift: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            rotate_deg: 10.0,
            crop_min: 0.9,
            brightness: 0.1,
            contrast_min: 0.8,
            contrast_max: 1.25,
            gamma_min: 0.8,
            gamma_max: 1.25,
            noise_sigma: 0.05,
            prob: 0.5,
            seed: 0,
        }
    }
}

/// Redraws allowed when a geometric draw pushes the centre off the image.
pub const AUGMENT_RETRIES: usize = 10;
/// Gray level of zero wave amplitude, used to fill uncovered pixels.
const FILL: f32 = 128.0 / 255.0;

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            shift: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotate_deg: 0.0,
            crop_min: 1.0,
            brightness: 0.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
            gamma_min: 1.0,
            gamma_max: 1.0,
            noise_sigma: 0.0,
            prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.shift, self.rotate_deg, self.brightness, self.noise_sigma];
        let ordered = [
            (self.scale_min, self.scale_max),
            (self.contrast_min, self.contrast_max),
            (self.gamma_min, self.gamma_max),
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0))
            || ordered.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi))
            || !(self.crop_min > 0.0 && self.crop_min <= 1.0)
            || !(0.0..=1.0).contains(&self.prob)
        {
            return Err(Error::validation(format!("augmentation parameters out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn take_from(cfg: &mut KvConfig, prefix: &str) -> Result<Self> {
        let d = AugmentParams::default();
        let mut t = |n: &str, v: f64| cfg.take_or(&format!("{prefix}{n}"), v);
        let p = AugmentParams {
            shift: t("shift", d.shift)?,
            scale_min: t("scale_min", d.scale_min)?,
            scale_max: t("scale_max", d.scale_max)?,
            rotate_deg: t("rotate_deg", d.rotate_deg)?,
            crop_min: t("crop_min", d.crop_min)?,
            brightness: t("brightness", d.brightness)?,
            contrast_min: t("contrast_min", d.contrast_min)?,
            contrast_max: t("contrast_max", d.contrast_max)?,
            gamma_min: t("gamma_min", d.gamma_min)?,
            gamma_max: t("gamma_max", d.gamma_max)?,
            noise_sigma: t("noise_sigma", d.noise_sigma)?,
            prob: t("prob", d.prob)?,
            seed: 0,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Row-major 2×3 affine map `(x, y) ↦ (a x + b y + c, d x + e y + f)` in
/// pixel-centre coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    /// Rotation by `deg` (clockwise on screen, since y points down) and
    /// isotropic scaling about `center`.
    pub fn rotate_scale(center: (f64, f64), deg: f64, scale: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        let (a, b, d, e) = (scale * c, -scale * s, scale * s, scale * c);
        Affine([a, b, center.0 - a * center.0 - b * center.1, d, e, center.1 - d * center.0 - e * center.1])
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let m = &self.0;
        (m[0] * p.0 + m[1] * p.1 + m[2], m[3] * p.0 + m[4] * p.1 + m[5])
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &Affine) -> Affine {
        let (a, b) = (&self.0, &first.0);
        Affine([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.0;
        let det = m[0] * m[4] - m[1] * m[3];
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, d, e) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Some(Affine([a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])]))
    }
}

/// Resample `src` through `forward` (source → destination) with bilinear
/// interpolation; destination pixels mapping outside the source get `fill`.
pub fn warp(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize, forward: &Affine, fill: f32) -> Vec<f32> {
    let inv = forward.inverse().expect("non-degenerate affine");
    let mut out = vec![fill; dw * dh];
    for y in 0..dh {
        for x in 0..dw {
            let (px, py) = inv.apply((x as f64, y as f64));
            if px < -0.5 || py < -0.5 || px > sw as f64 - 0.5 || py > sh as f64 - 0.5 {
                continue;
            }
            let px = px.clamp(0.0, (sw - 1) as f64);
            let py = py.clamp(0.0, (sh - 1) as f64);
            let (x0, y0) = (px.floor() as usize, py.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (fx, fy) = ((px - x0 as f64) as f32, (py - y0 as f64) as f32);
            let v = |xx: usize, yy: usize| src[yy * sw + xx];
            let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
            let bot = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
            out[y * dw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Independent stream per (seed, series, frame, epoch).
pub fn sample_rng(seed: u64, series_id: u32, frame_index: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((series_id as u64) << 32) ^ frame_index as u64);
    rng.set_word_pos((epoch as u128) << 40);
    rng
}

fn draw(rng: &mut ChaCha8Rng, prob: f64, lo: f64, hi: f64, neutral: f64) -> f64 {
    if lo == hi || prob == 0.0 || !rng.random_bool(prob) {
        return neutral;
    }
    rng.random_range(lo..=hi)
}

fn draw_geometry(p: &AugmentParams, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Affine {
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let tx = draw(rng, p.prob, -p.shift, p.shift, 0.0) * w as f64;
    let ty = draw(rng, p.prob, -p.shift, p.shift, 0.0) * h as f64;
    let scale = draw(rng, p.prob, p.scale_min, p.scale_max, 1.0);
    let deg = draw(rng, p.prob, -p.rotate_deg, p.rotate_deg, 0.0);
    let crop = draw(rng, p.prob, p.crop_min, 1.0, 1.0);
    let mut m = Affine::rotate_scale(center, deg, scale);
    m = Affine::translation(tx, ty).after(&m);
    if crop < 1.0 {
        // Keep a crop×crop window at a random offset and stretch it back.
        let ox = rng.random_range(0.0..=(1.0 - crop)) * w as f64;
        let oy = rng.random_range(0.0..=(1.0 - crop)) * h as f64;
        let k = 1.0 / crop;
        let stretch = Affine([k, 0.0, (0.5 - ox) * k - 0.5, 0.0, k, (0.5 - oy) * k - 0.5]);
        m = stretch.after(&m);
    }
    m
}

/// Random geometric and photometric augmentation. Geometric maps move the
/// centre with the image; draws that push the centre outside are redrawn,
/// and the original sample is returned when the retry budget runs out.
pub fn augment(sample: &Sample, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Sample {
    let (w, h) = (sample.width, sample.height);
    let mut geometry = None;
    for _ in 0..=AUGMENT_RETRIES {
        let m = draw_geometry(params, w, h, rng);
        match sample.annotation.center_px.map(|c| m.apply(c)) {
            Some(c) if !in_bounds(c, w, h) => continue,
            moved => {
                geometry = Some((m, moved));
                break;
            }
        }
    }
    let Some((m, center)) = geometry else {
        return sample.clone();
    };
    let mut out = sample.clone();
    if m != Affine::IDENTITY {
        out.image = warp(&sample.image, w, h, w, h, &m, FILL);
        out.annotation.center_px = center;
    }

    let brightness = draw(rng, params.prob, -params.brightness, params.brightness, 0.0) as f32;
    let contrast = draw(rng, params.prob, params.contrast_min, params.contrast_max, 1.0) as f32;
    let gamma = draw(rng, params.prob, params.gamma_min, params.gamma_max, 1.0) as f32;
    let sigma = draw(rng, params.prob, 0.0, params.noise_sigma, 0.0) as f32;
    if brightness != 0.0 || contrast != 1.0 {
        out.image
            .iter_mut()
            .for_each(|v| *v = (((*v - 0.5) * contrast + 0.5) + brightness).clamp(0.0, 1.0));
    }
    if gamma != 1.0 {
        out.image.iter_mut().for_each(|v| *v = v.powf(gamma));
    }
    if sigma > 0.0 {
        for v in out.image.iter_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v = (*v + sigma * n).clamp(0.0, 1.0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// On-disk series: `seriesSSS/seriesSSS_frameFFFF.pgm` plus `annotations.csv`.

pub const ANNOTATION_HEADER: &str = "frame_index,label,defect_x_px,defect_y_px";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PGM. Header comments (`#`) are allowed.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut line = 1;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            if bytes[pos] == b'\n' {
                line += 1;
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, line, "truncated header"));
        }
        tokens.push((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), line));
    }
    if tokens[0].0 != "P5" {
        return Err(parse_err(path, tokens[0].1, format!("expected P5 magic, found `{}`", tokens[0].0)));
    }
    let num = |i: usize| -> Result<usize> {
        tokens[i]
            .0
            .parse()
            .map_err(|_| parse_err(path, tokens[i].1, format!("bad header number `{}`", tokens[i].0)))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(parse_err(path, tokens[3].1, format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(path, tokens[1].1, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos < bytes.len() && bytes[pos] == b'\n' {
        line += 1;
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != width * height {
        return Err(parse_err(
            path,
            line,
            format!("raster has {} bytes, expected {}", data.len(), width * height),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        data: data.to_vec(),
    })
}

pub fn series_dir_name(id: u32) -> String {
    format!("series{id:03}")
}

pub fn frame_file_name(id: u32, frame: usize) -> String {
    format!("series{id:03}_frame{frame:04}.pgm")
}

/// Write `root/seriesSSS/` and return its path.
pub fn save_series(series: &LabeledSeries, root: &Path) -> Result<PathBuf> {
    if series.frames.len() != series.annotations.len() {
        return Err(Error::validation("series frame and annotation counts differ"));
    }
    let dir = root.join(series_dir_name(series.id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut csv = String::from(ANNOTATION_HEADER);
    csv.push('\n');
    for (i, (frame, ann)) in series.frames.iter().zip(&series.annotations).enumerate() {
        write_pgm(&dir.join(frame_file_name(series.id, i)), frame)?;
        match ann.center_px {
            Some((x, y)) => csv.push_str(&format!("{i},{},{x},{y}\n", ann.label)),
            None => csv.push_str(&format!("{i},{},,\n", ann.label)),
        }
    }
    let path = dir.join("annotations.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Parse `annotations.csv`; rows come back ordered by frame index, which
/// must run 0..n without gaps.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(usize, Annotation, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        if line == 1 && raw.starts_with("frame_index") {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 columns, found {}", cols.len())));
        }
        let frame: usize = cols[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad frame index `{}`", cols[0])))?;
        let coord = |s: &str, name: &str| -> Result<f64> {
            if s.is_empty() {
                return Err(parse_err(path, line, format!("label 1 requires {name}")));
            }
            s.parse()
                .map_err(|_| parse_err(path, line, format!("bad {name} `{s}`")))
        };
        let ann = match cols[1] {
            "1" => Annotation::defect(coord(cols[2], "defect_x_px")?, coord(cols[3], "defect_y_px")?),
            "0" | "2" => {
                if !cols[2].is_empty() || !cols[3].is_empty() {
                    return Err(parse_err(path, line, "no-defect row must leave the coordinates empty"));
                }
                Annotation::no_defect()
            }
            other => return Err(parse_err(path, line, format!("bad label `{other}`"))),
        };
        rows.push((frame, ann, line));
    }
    rows.sort_by_key(|r| r.0);
    for (expect, (frame, _, line)) in rows.iter().enumerate() {
        if *frame != expect {
            return Err(parse_err(path, *line, format!("frame index {frame} out of sequence (expected {expect})")));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

/// Load a directory written by [`save_series`]; the id comes from its name.
pub fn load_series(dir: &Path) -> Result<LabeledSeries> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let id: u32 = name
        .strip_prefix("series")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::validation(format!("{}: directory name is not seriesNNN", dir.display())))?;
    let annotations = read_annotations(&dir.join("annotations.csv"))?;
    let frames = (0..annotations.len())
        .map(|i| read_pgm(&dir.join(frame_file_name(id, i))))
        .collect::<Result<Vec<_>>>()?;
    for (i, (f, a)) in frames.iter().zip(&annotations).enumerate() {
        a.validate(f.width, f.height)
            .map_err(|e| Error::validation(format!("{} frame {i}: {e}", dir.display())))?;
    }
    Ok(LabeledSeries { id, frames, annotations })
}

/// Every `seriesNNN` directory under `root`, ordered by id.
pub fn load_corpus(root: &Path) -> Result<Vec<LabeledSeries>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("series")))
        .collect();
    dirs.sort();
    let mut all = dirs.iter().map(|d| load_series(d)).collect::<Result<Vec<_>>>()?;
    all.sort_by_key(|s| s.id);
    Ok(all)
}
