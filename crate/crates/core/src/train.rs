//! Joint classification + localisation objective, mini-batch Adam training
//! and the staged freeze schedule with validation-based selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::dataset::{augment, sample_rng, AugmentParams, Class, Sample};
use crate::error::{Error, Result};
use crate::eval::pr_curve;
use crate::model::{ForwardMode, ModelParams, ParamGroup};
use crate::nn::{adam_step, AdamConfig, Graph, Scalar, Var};

/// Log-sum-exp cross-entropy `log Σ_j exp(s_j − s_c)`.
pub fn cross_entropy(scores: [f64; 2], class: Class) -> Result<f64> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation(format!("cross_entropy: non-finite scores {scores:?}")));
    }
    let m = scores[0].max(scores[1]);
    let lse = m + ((scores[0] - m).exp() + (scores[1] - m).exp()).ln();
    Ok(lse - scores[class.index()])
}

/// Images with labels and normalised `[0,1]²` targets for positives.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub images: Vec<&'a [f32]>,
    pub labels: Vec<Class>,
    pub targets: Vec<Option<[f64; 2]>>,
}

impl<'a> Batch<'a> {
    pub fn new(images: Vec<&'a [f32]>, labels: Vec<Class>, targets: Vec<Option<[f64; 2]>>) -> Result<Self> {
        if images.len() != labels.len() || labels.len() != targets.len() || images.is_empty() {
            return Err(Error::validation("batch needs equally many (≥1) images, labels and targets"));
        }
        for (i, (l, t)) in labels.iter().zip(&targets).enumerate() {
            if (*l == Class::Defect) != t.is_some() {
                return Err(Error::validation(format!("batch item {i}: target must be present iff label is 1")));
            }
        }
        Ok(Batch { images, labels, targets })
    }

    /// Targets are pixel centres divided by `(W−1, H−1)`.
    pub fn from_samples(samples: &'a [Sample]) -> Result<Self> {
        Self::from_refs(samples.iter())
    }

    pub fn from_refs(samples: impl Iterator<Item = &'a Sample>) -> Result<Self> {
        let (mut images, mut labels, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            images.push(s.image.as_slice());
            labels.push(s.annotation.label);
            let (nx, ny) = ((s.width.max(2) - 1) as f64, (s.height.max(2) - 1) as f64);
            targets.push(s.annotation.center_px.map(|c| [c.0 / nx, c.1 / ny]));
        }
        Self::new(images, labels, targets)
    }
}

/// `(1/N) Σ CE(scores_n; c_n) + (1/N₊) Σ_{positives} ‖loc_n − ℓ_n‖²`, with
/// the regression term 0 when the batch has no positives.
pub fn head_loss<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    locs: Var,
    labels: &[Class],
    targets: &[Option<[f64; 2]>],
) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let ce = g.cross_entropy_mean(scores, &idx)?;
    let mask: Vec<bool> = targets.iter().map(Option::is_some).collect();
    let flat: Vec<T> = targets
        .iter()
        .flat_map(|t| t.unwrap_or([0.0, 0.0]))
        .map(T::of_f64)
        .collect();
    let reg = g.masked_sq_error(locs, &flat, &mask)?;
    g.add(ce, reg)
}

/// Objective value of `batch` under `params` (running batch-norm statistics).
pub fn multitask_loss(batch: &Batch, params: &ModelParams) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = params.bind(&mut g);
    let x = g.leaf(params.input_batch(&batch.images)?);
    let mut bn = params.bn_stats.clone();
    let out = params.forward(&mut g, &vars, x, &mut bn, ForwardMode::Inference)?;
    let l = head_loss(&mut g, out.scores, out.locs, &batch.labels, &batch.targets)?;
    Ok(g.data(l)[0] as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    HeadsOnly,
    /// Heads plus the final backbone stage.
    HeadsAndTail,
    All,
}

impl TrainableSet {
    pub fn includes(self, group: ParamGroup, n_stages: usize) -> bool {
        match (self, group) {
            (_, ParamGroup::Head) | (TrainableSet::All, _) => true,
            (TrainableSet::HeadsAndTail, ParamGroup::Stage(s)) => s + 1 == n_stages,
            (TrainableSet::HeadsOnly, ParamGroup::Stage(_)) => false,
        }
    }
}

impl fmt::Display for TrainableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainableSet::HeadsOnly => "heads",
            TrainableSet::HeadsAndTail => "heads+tail",
            TrainableSet::All => "all",
        })
    }
}

impl FromStr for TrainableSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "heads" => Ok(TrainableSet::HeadsOnly),
            "heads+tail" => Ok(TrainableSet::HeadsAndTail),
            "all" => Ok(TrainableSet::All),
            other => Err(format!("unknown trainable set `{other}` (heads|heads+tail|all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
    pub trainable: TrainableSet,
}

/// Consecutive stages; stage `k` covers the epochs right after stage `k−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::three_stage(10, 10, 10)
    }
}

impl StageSchedule {
    /// Heads at 1e-3, then heads and the last stage at 1e-4, then everything
    /// at 1e-4.
    pub fn three_stage(e1: usize, e2: usize, e3: usize) -> Self {
        StageSchedule {
            stages: vec![
                Stage { epochs: e1, lr: 1e-3, trainable: TrainableSet::HeadsOnly },
                Stage { epochs: e2, lr: 1e-4, trainable: TrainableSet::HeadsAndTail },
                Stage { epochs: e3, lr: 1e-4, trainable: TrainableSet::All },
            ],
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::validation("schedule has no epochs"));
        }
        if let Some(s) = self.stages.iter().find(|s| !(s.lr >= 0.0) || !s.lr.is_finite()) {
            return Err(Error::validation(format!("schedule learning rate {} is invalid", s.lr)));
        }
        Ok(())
    }

    /// 1-based stage number and stage for a 1-based epoch.
    pub fn stage_at(&self, epoch: usize) -> Option<(usize, &Stage)> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.epochs;
            if epoch >= 1 && epoch <= end {
                return Some((i + 1, s));
            }
        }
        None
    }

    /// `stages = 10:0.001:heads,10:0.0001:heads+tail,…`
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let stages = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|part| {
                let f: Vec<&str> = part.split(':').collect();
                if f.len() != 3 {
                    return Err(format!("stage `{part}`: expected epochs:lr:set"));
                }
                Ok(Stage {
                    epochs: f[0].parse().map_err(|e| format!("stage `{part}`: {e}"))?,
                    lr: f[1].parse().map_err(|e| format!("stage `{part}`: {e}"))?,
                    trainable: f[2].parse()?,
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(StageSchedule { stages })
    }
}

impl fmt::Display for StageSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}:{}:{}", s.epochs, s.lr, s.trainable))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    ValLoss,
    /// F-measure of precision and recall at the configured margin.
    FAtR,
}

impl FromStr for SelectionMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val_loss" => Ok(SelectionMetric::ValLoss),
            "f_at_r" => Ok(SelectionMetric::FAtR),
            other => Err(format!("unknown selection metric `{other}` (val_loss|f_at_r)")),
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::ValLoss => "val_loss",
            SelectionMetric::FAtR => "f_at_r",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: StageSchedule,
    /// `None` trains on the raw samples.
    pub augment: Option<AugmentParams>,
    pub metric: SelectionMetric,
    /// Margin in pixels for the F-measure.
    pub margin_px: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            seed,
            schedule: StageSchedule::default(),
            augment: Some(AugmentParams::default()),
            metric: SelectionMetric::ValLoss,
            margin_px: 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if !(self.margin_px >= 0.0) {
            return Err(Error::validation("selection margin must be non-negative"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.schedule.validate()
    }

    /// Reads `prefix`-qualified keys; `seed` is required.
    pub fn take_from(cfg: &mut KvConfig, prefix: &str) -> Result<Self> {
        let k = |n: &str| format!("{prefix}{n}");
        let d = TrainConfig::new(0);
        let seed = cfg.require(&k("seed"))?;
        let schedule = match cfg.take::<String>(&k("stages"))? {
            Some(text) => StageSchedule::parse(&text).map_err(|msg| Error::Config {
                key: k("stages"),
                line: 0,
                msg,
            })?,
            None => d.schedule,
        };
        let use_aug: bool = cfg.take_or(&k("augment"), true)?;
        let aug = AugmentParams::take_from(cfg, &k("aug."))?;
        let c = TrainConfig {
            batch_size: cfg.take_or(&k("batch_size"), d.batch_size)?,
            seed,
            schedule,
            augment: use_aug.then(|| AugmentParams { seed, ..aug }),
            metric: cfg.take_or(&k("select"), d.metric)?,
            margin_px: cfg.take_or(&k("margin_px"), d.margin_px)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Apply `trainable` to `params` and run one shuffled pass over `data`.
/// Returns the sample-weighted mean loss. With `lr = 0` nothing is updated,
/// including batch-norm running statistics.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    data: &[Sample],
    params: &mut ModelParams,
    lr: f64,
    trainable: TrainableSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    augment_with: Option<&AugmentParams>,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("training data is empty"));
    }
    if batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let n_stages = params.num_stages();
    params.set_trainable(|g| trainable.includes(g, n_stages));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let adam = AdamConfig::with_lr(lr);
    let mut total = 0.0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let owned: Vec<Sample>;
        let batch = match augment_with {
            Some(aug) => {
                owned = chunk
                    .iter()
                    .map(|&i| {
                        let s = &data[i];
                        augment(s, aug, &mut sample_rng(aug.seed, s.series_id, s.frame_index, epoch))
                    })
                    .collect();
                Batch::from_samples(&owned)?
            }
            None => Batch::from_refs(chunk.iter().map(|&i| &data[i]))?,
        };
        let mut g = Graph::<f32>::new();
        let vars = params.bind(&mut g);
        let x = g.leaf(params.input_batch(&batch.images)?);
        let mut bn = params.bn_stats.clone();
        let out = params.forward(&mut g, &vars, x, &mut bn, ForwardMode::Train)?;
        let diverged = |v: Var| g.data(v).iter().any(|x| !x.is_finite());
        if diverged(out.scores) || diverged(out.locs) {
            return Err(Error::NonFiniteLoss { epoch, batch: b });
        }
        let loss = head_loss(&mut g, out.scores, out.locs, &batch.labels, &batch.targets)?;
        let value = g.data(loss)[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b });
        }
        total += value * chunk.len() as f64;
        if lr > 0.0 {
            g.backward(loss)?;
            for (p, v) in params.params.iter_mut().zip(&vars) {
                p.tensor.grad = if p.frozen { None } else { g.grad(*v).map(<[f32]>::to_vec) };
            }
            adam_step(params.params.iter_mut(), &adam)?;
            params.bn_stats = bn;
        }
    }
    Ok(total / data.len() as f64)
}

/// Mean objective over `data` in evaluation batches.
pub fn dataset_loss(data: &[Sample], params: &ModelParams, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("evaluation data is empty"));
    }
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        total += multitask_loss(&Batch::from_samples(chunk)?, params)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// F-measure at margin `r` of `params` on `data`.
pub fn f_at_r(data: &[Sample], params: &ModelParams, r: f64, batch_size: usize) -> Result<f64> {
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        preds.extend(params.predict_batch(&imgs)?);
    }
    let truths: Vec<_> = data.iter().map(|s| s.annotation).collect();
    Ok(pr_curve(&preds, &truths, &[r])?[0].f_measure())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// 1-based stage number.
    pub stage: usize,
    pub trainable: TrainableSet,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// F-measure at the configured margin.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub metric: SelectionMetric,
    /// 1-based epoch whose checkpoint was selected.
    pub selected_epoch: usize,
}

pub const REPORT_HEADER: &str = "epoch,stage,train_loss,val_loss,val_metric";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.stage, e.train_loss, e.val_loss, e.val_metric
            ));
        }
        out
    }
}

/// Best 1-based epoch: lowest validation loss or highest F-measure, earliest
/// on ties. NaN values never win.
pub fn select_best(report: &TrainReport, metric: SelectionMetric) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for e in &report.epochs {
        let score = match metric {
            SelectionMetric::ValLoss => -e.val_loss,
            SelectionMetric::FAtR => e.val_metric,
        };
        let better = match best {
            None => true,
            Some((_, b)) => score > b || (b.is_nan() && !score.is_nan()),
        };
        if better {
            best = Some((e.epoch, score));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::validation("no completed epochs to select from"))
}

/// Run every stage, validating after each epoch, and return the report with
/// the parameters of the selected epoch.
pub fn run_schedule(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut params: ModelParams,
) -> Result<(TrainReport, ModelParams)> {
    run_schedule_with(train, val, cfg, &mut params, |_| {})
}

/// [`run_schedule`] with a callback after each epoch (progress reporting).
pub fn run_schedule_with(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    params: &mut ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainReport, ModelParams)> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::validation("validation data is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        epochs: Vec::new(),
        metric: cfg.metric,
        selected_epoch: 0,
    };
    let mut best: Option<ModelParams> = None;
    for epoch in 1..=cfg.schedule.total_epochs() {
        let (stage, st) = cfg.schedule.stage_at(epoch).expect("epoch within schedule");
        let train_loss = train_epoch(
            train,
            params,
            st.lr,
            st.trainable,
            cfg.batch_size,
            &mut rng,
            cfg.augment.as_ref(),
            epoch,
        )?;
        let rec = EpochRecord {
            epoch,
            stage,
            trainable: st.trainable,
            lr: st.lr,
            train_loss,
            val_loss: dataset_loss(val, params, cfg.batch_size)?,
            val_metric: f_at_r(val, params, cfg.margin_px, cfg.batch_size)?,
        };
        on_epoch(&rec);
        report.epochs.push(rec);
        if select_best(&report, cfg.metric)? == epoch {
            best = Some(params.clone());
        }
    }
    report.selected_epoch = select_best(&report, cfg.metric)?;
    let mut best = best.expect("at least one epoch");
    best.set_trainable(|_| true);
    Ok((report, best))
}
