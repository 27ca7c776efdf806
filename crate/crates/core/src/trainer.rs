//! The gated pretraining loop: warmup + cosine schedule, uncurated early
//! epochs, threshold calibration, then FRD-gated updates.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::augment::{make_pair, AugmentedBatchPair, ChannelNorm, TransformSpec};
use crate::autodiff::{Gradients, Graph, Tensor};
use crate::curation::{
    curate, score_pair, CurationAction, CurationConfig, CurationDecision, FeatureSource, ThresholdState,
};
use crate::data::{iterate_batches, BatchPlan, ImageDataset};
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, knn_probe};
use crate::losses::{regularized_loss_graph, LossBreakdown, LossConfig, RegularizerKind};
use crate::model::{save_checkpoint, EncoderConfig, EncoderKind, Mode, ModelParams, ParamKind};
use crate::rng::{derive_path, derive_seed};

const SEED_SHUFFLE: u64 = 1;
const SEED_AUGMENT: u64 = 2;
const SEED_INIT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Standardize inputs with per-channel statistics of the training set
    /// when the transform carries no explicit normalization.
    pub standardize: bool,
    pub loss: LossConfig,
    pub curation: CurationConfig,
    pub transform: TransformSpec,
    /// `input` and `init_seed` are filled in by [`pretrain`].
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    /// 30 epochs with 5 warmup epochs; sized for CPU runs of a few minutes.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 128,
            base_lr: 0.3,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-4,
            checkpoint_every: 0,
            standardize: true,
            loss: LossConfig::default(),
            curation: CurationConfig::default(),
            transform: TransformSpec::default(),
            encoder: EncoderConfig {
                kind: EncoderKind::Mlp,
                ..EncoderConfig::default()
            },
        }
    }

    /// 200 epochs, 30 warmup epochs, convolutional encoder.
    pub fn paper() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 30,
            encoder: EncoderConfig::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "epochs must be positive and batch_size at least 2".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.curation.enabled && self.curation.calibration_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "calibration_epoch {} must be below epochs {}",
                self.curation.calibration_epoch, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight_decay be nonnegative".into(),
            ));
        }
        self.loss.validate()?;
        self.curation.validate()?;
        self.transform.validate()
    }

    /// Calibration happens only with curation enabled.
    fn gating_from(&self) -> Option<usize> {
        self.curation.enabled.then_some(self.curation.calibration_epoch)
    }
}

/// Learning rate for 0-based `epoch`: linear warmup to `base_lr`, then a
/// half-cosine decay over the remaining epochs.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let (base, w, e) = (config.base_lr, config.warmup_epochs, config.epochs);
    if epoch < w {
        base * (epoch + 1) as f64 / w as f64
    } else {
        base * 0.5 * (1.0 + (PI * (epoch - w) as f64 / (e - w) as f64).cos())
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .entries()
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => Tensor::zeros(e.value.shape()),
                ParamKind::Buffer => Tensor::zeros(&[0]),
            })
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut ModelParams, grads: &[(usize, Tensor)], lr: f64) {
        for (slot, g) in grads {
            let v = self.velocity[*slot].data_mut();
            let p = model.value_mut(*slot).data_mut();
            for ((vi, pi), gi) in v.iter_mut().zip(p.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Final or intermediate outcome of one attempt at a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepAction {
    Update,
    /// First draw rejected; a second draw follows.
    Reaugment,
    ReaugmentedUpdate,
    Skipped,
}

impl StepAction {
    pub fn as_str(self) -> &'static str {
        match self {
            StepAction::Update => "update",
            StepAction::Reaugment => "reaugment",
            StepAction::ReaugmentedUpdate => "reaugmented_update",
            StepAction::Skipped => "skipped",
        }
    }

    pub fn updated(self) -> bool {
        matches!(self, StepAction::Update | StepAction::ReaugmentedUpdate)
    }
}

impl From<CurationAction> for StepAction {
    fn from(a: CurationAction) -> Self {
        match a {
            CurationAction::Update => StepAction::Update,
            CurationAction::Reaugment => StepAction::Reaugment,
            CurationAction::ReaugmentedUpdate => StepAction::ReaugmentedUpdate,
            CurationAction::Skipped => StepAction::Skipped,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub epoch: usize,
    pub batch_index: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub frd_score: Option<f64>,
    pub attempt: u8,
    pub action: StepAction,
    /// Present only for gated steps.
    pub decision: Option<CurationDecision>,
}

pub const METRICS_HEADER: &str = "epoch,batch_index,lr,ntxent,regularizer,total,frd,attempt,action";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let frd = self.frd_score.map(|f| f.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.batch_index,
            self.lr,
            self.loss.nt_xent,
            self.loss.regularizer,
            self.loss.total,
            frd,
            self.attempt,
            self.action.as_str()
        )
    }
}

/// Per-step inputs beyond the model and batch.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    /// 1-based.
    pub epoch: usize,
    pub batch_index: usize,
    pub lr: f64,
    pub loss: &'a LossConfig,
    pub curation: &'a CurationConfig,
    /// Measure FRD on this step (calibration and gated epochs).
    pub score: bool,
    /// Frozen threshold; `Some` activates gating.
    pub threshold: Option<&'a ThresholdState>,
}

struct Attempt {
    graph: Graph,
    total: crate::autodiff::Var,
    loss: LossBreakdown,
    params: Vec<(usize, crate::autodiff::Var)>,
    stat_updates: Vec<crate::model::StatUpdate>,
    frd: Option<f64>,
}

fn row_norm_range(t: &Tensor) -> (f64, f64) {
    let w = t.row_len();
    t.data()
        .chunks(w)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold((f64::INFINITY, 0.0), |(lo, hi), n| (lo.min(n), hi.max(n)))
}

fn view_features(g: &Graph, fp: &crate::model::ForwardPass, source: FeatureSource, n: usize) -> (Tensor, Tensor) {
    let feats = match source {
        FeatureSource::Encoder => g.value(fp.h),
        FeatureSource::Projection => g.value(fp.z),
    };
    (feats.slice_rows(0, n), feats.slice_rows(n, 2 * n))
}

/// FRD of a pair exactly as the trainer measures it: one training-mode
/// pass over both views stacked, without committing batch statistics.
pub fn score_batch(model: &ModelParams, pair: &AugmentedBatchPair, curation: &CurationConfig) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(pair.stacked());
    let fp = model.forward(&mut g, x, Mode::Train, false)?;
    let (a, b) = view_features(&g, &fp, curation.source, pair.len());
    score_pair(&a, &b, curation)
}

fn evaluate(model: &ModelParams, pair: &AugmentedBatchPair, ctx: &StepContext<'_>) -> Result<Attempt> {
    let n = pair.len();
    let mut g = Graph::new();
    let x = g.constant(pair.stacked());
    let fp = model.forward(&mut g, x, Mode::Train, true)?;
    let frd = if ctx.score {
        let (a, b) = view_features(&g, &fp, ctx.curation.source, n);
        Some(score_pair(&a, &b, ctx.curation)?)
    } else {
        None
    };
    let (total, loss) = regularized_loss_graph(&mut g, fp.z, ctx.loss)?;
    if !loss.total.is_finite() {
        let (lo, hi) = row_norm_range(g.value(fp.z));
        return Err(Error::Numerical(format!(
            "non-finite loss at epoch {} batch {}: ntxent={} regularizer={} frd={:?} z row norms in [{lo}, {hi}]",
            ctx.epoch, ctx.batch_index, loss.nt_xent, loss.regularizer, frd
        )));
    }
    Ok(Attempt {
        graph: g,
        total,
        loss,
        params: fp.params,
        stat_updates: fp.stat_updates,
        frd,
    })
}

fn apply(model: &mut ModelParams, opt: &mut Sgd, attempt: Attempt, lr: f64) -> Result<()> {
    let mut grads: Gradients = attempt.graph.backward(attempt.total)?;
    let mut update = Vec::with_capacity(attempt.params.len());
    for (slot, var) in &attempt.params {
        if let Some(g) = grads.take(*var) {
            update.push((*slot, g));
        }
    }
    opt.step(model, &update, lr);
    model.apply_stat_updates(&attempt.stat_updates);
    Ok(())
}

/// One training step. With a threshold, a first-draw rejection calls
/// `reaugment` for a fresh pair and a second rejection skips the batch,
/// leaving the model and optimizer untouched. Returns one record per
/// attempt.
pub fn train_step<F>(
    model: &mut ModelParams,
    opt: &mut Sgd,
    pair: &AugmentedBatchPair,
    reaugment: F,
    ctx: &StepContext<'_>,
) -> Result<Vec<StepRecord>>
where
    F: FnOnce() -> Result<AugmentedBatchPair>,
{
    if let Some(t) = ctx.threshold {
        if !t.frozen {
            return Err(Error::Contract("gating requires a frozen threshold".into()));
        }
    }
    let record = |a: &Attempt, attempt: u8, action: StepAction, decision: Option<CurationDecision>| StepRecord {
        epoch: ctx.epoch,
        batch_index: ctx.batch_index,
        lr: ctx.lr,
        loss: a.loss,
        frd_score: a.frd,
        attempt,
        action,
        decision,
    };
    let first = evaluate(model, pair, ctx)?;
    let Some(threshold) = ctx.threshold else {
        let rec = record(&first, 1, StepAction::Update, None);
        apply(model, opt, first, ctx.lr)?;
        return Ok(vec![rec]);
    };
    let score_of = |a: &Attempt| {
        a.frd
            .ok_or_else(|| Error::Contract("gated step without an FRD score".into()))
    };
    let decision = curate(score_of(&first)?, threshold, 1)?;
    let mut records = vec![record(&first, 1, decision.action.into(), Some(decision))];
    if decision.accepted {
        apply(model, opt, first, ctx.lr)?;
        return Ok(records);
    }
    drop(first);
    let second = evaluate(model, &reaugment()?, ctx)?;
    let decision = curate(score_of(&second)?, threshold, 2)?;
    records.push(record(&second, 2, decision.action.into(), Some(decision)));
    if decision.accepted {
        apply(model, opt, second, ctx.lr)?;
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over steps that updated the model.
    pub mean_total: f64,
    pub updates: usize,
    pub reaugmented: usize,
    pub skipped: usize,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ModelParams,
    pub optimizer: Sgd,
    pub threshold: Option<ThresholdState>,
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    /// The transform actually used, with any standardization filled in.
    pub transform: TransformSpec,
}

/// Transform with standardization resolved against `ds`.
pub fn resolve_transform(config: &TrainConfig, ds: &ImageDataset) -> TransformSpec {
    let mut t = config.transform.clone();
    if config.standardize && t.norm.is_none() {
        t.norm = Some(ChannelNorm::from_dataset(ds));
    }
    t
}

/// Encoder configuration bound to `ds`'s image shape and `config.seed`.
pub fn resolve_encoder(config: &TrainConfig, ds: &ImageDataset) -> EncoderConfig {
    let side = config.transform.output_size;
    EncoderConfig {
        input: (ds.channels, side.unwrap_or(ds.height), side.unwrap_or(ds.width)),
        init_seed: derive_seed(config.seed, SEED_INIT),
        ..config.encoder.clone()
    }
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.ckpt")
}

/// Pretrains on `ds`. With `out_dir`, writes `metrics.csv` (one row per
/// attempt), periodic `epoch_NNN.ckpt` files and `model.ckpt`.
pub fn pretrain(
    ds: &ImageDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<PretrainOutcome> {
    config.validate()?;
    let transform = resolve_transform(config, ds);
    let mut model = ModelParams::init(&resolve_encoder(config, ds))?;
    let mut opt = Sgd::new(&model, config.momentum, config.weight_decay);
    let plan = BatchPlan {
        seed: derive_seed(config.seed, SEED_SHUFFLE),
        batch_size: config.batch_size,
        drop_last: true,
    };
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = metrics_path(dir);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let calibration = config.gating_from();
    let mut threshold: Option<ThresholdState> = None;
    let mut records = Vec::new();
    let mut summaries = Vec::new();

    let result = (|| -> Result<()> {
        for e0 in 0..config.epochs {
            let epoch = e0 + 1;
            let lr = lr_at(config, e0);
            let calibrating = calibration == Some(epoch);
            let mut collecting = calibrating.then(|| ThresholdState::collecting(epoch));
            let ctx = StepContext {
                epoch,
                batch_index: 0,
                lr,
                loss: &config.loss,
                curation: &config.curation,
                score: calibration.is_some_and(|c| epoch >= c),
                threshold: threshold.as_ref(),
            };
            let mut summary = EpochSummary {
                epoch,
                lr,
                mean_total: 0.0,
                updates: 0,
                reaugmented: 0,
                skipped: 0,
                threshold: threshold.as_ref().map(|t| t.tau_frd),
            };
            for (b, indices) in iterate_batches(ds.len(), &plan, e0 as u64)?.iter().enumerate() {
                let seed_for = |attempt: u64| derive_path(config.seed, &[SEED_AUGMENT, e0 as u64, b as u64, attempt]);
                let pair = make_pair(ds, indices, &transform, seed_for(1))?;
                let ctx = StepContext { batch_index: b, ..ctx };
                let step = train_step(
                    &mut model,
                    &mut opt,
                    &pair,
                    || make_pair(ds, indices, &transform, seed_for(2)),
                    &ctx,
                )?;
                for r in &step {
                    if let Some((w, path)) = metrics.as_mut() {
                        writeln!(w, "{}", r.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    match r.action {
                        StepAction::Update | StepAction::ReaugmentedUpdate => {
                            summary.updates += 1;
                            summary.mean_total += r.loss.total;
                        }
                        StepAction::Reaugment => summary.reaugmented += 1,
                        StepAction::Skipped => summary.skipped += 1,
                    }
                    if let (Some(c), Some(score)) = (collecting.as_mut(), r.frd_score) {
                        c.record(score)?;
                    }
                }
                records.extend(step);
            }
            if let Some(mut c) = collecting.take() {
                c.freeze()?;
                summary.threshold = Some(c.tau_frd);
                threshold = Some(c);
            }
            if summary.updates > 0 {
                summary.mean_total /= summary.updates as f64;
            }
            model.epoch = epoch as u32;
            if let Some((w, path)) = metrics.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = out_dir {
                if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                    save_checkpoint(&model, dir.join(format!("epoch_{epoch:03}.ckpt")))?;
                }
            }
            on_epoch(&summary);
            summaries.push(summary);
        }
        Ok(())
    })();
    if let Some((w, _)) = metrics.as_mut() {
        let _ = w.flush();
    }
    result?;
    if let Some(dir) = out_dir {
        save_checkpoint(&model, final_checkpoint_path(dir))?;
    }
    Ok(PretrainOutcome {
        model,
        optimizer: opt,
        threshold,
        records,
        epochs: summaries,
        transform,
    })
}

/// One configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub regularizer: RegularizerKind,
    pub curation: bool,
}

impl AblationCell {
    pub fn grid(regularizers: &[RegularizerKind], curation: &[bool]) -> Vec<AblationCell> {
        curation
            .iter()
            .flat_map(|&c| {
                regularizers.iter().map(move |&r| AblationCell {
                    regularizer: r,
                    curation: c,
                })
            })
            .collect()
    }

    pub fn loss_label(&self) -> &'static str {
        match self.regularizer {
            RegularizerKind::None => "NT-Xent",
            RegularizerKind::Huber => "Reg. NT-Xent (Huber)",
            RegularizerKind::L1 => "Reg. NT-Xent (L1)",
            RegularizerKind::L2 => "Reg. NT-Xent (L2)",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub k: usize,
    pub source: FeatureSource,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            k: 5,
            source: FeatureSource::Encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    /// k-NN top-1 on the test split, or the error that stopped the cell.
    pub accuracy: std::result::Result<f64, String>,
    pub threshold: Option<f64>,
    pub skipped_steps: usize,
    pub dataset_fingerprint: String,
}

pub const ABLATION_HEADER: &str = "seed,frd,loss,regularizer,top1,threshold,skipped_steps,dataset_fingerprint,error";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let (acc, err) = match &self.accuracy {
            Ok(a) => (a.to_string(), String::new()),
            Err(e) => (String::new(), e.replace([',', '\n'], ";")),
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            if self.cell.curation { "on" } else { "off" },
            self.cell.loss_label(),
            self.cell.regularizer,
            acc,
            self.threshold.map(|t| t.to_string()).unwrap_or_default(),
            self.skipped_steps,
            self.dataset_fingerprint,
            err
        )
    }
}

fn run_cell(
    train: &ImageDataset,
    test: &ImageDataset,
    cell: AblationCell,
    seed: u64,
    base: &TrainConfig,
    probe: &ProbeSettings,
    fingerprint: &str,
) -> AblationRow {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.loss.regularizer = cell.regularizer;
    cfg.curation.enabled = cell.curation;
    let run = pretrain(train, &cfg, None, &mut |_| {}).and_then(|out| {
        let id = format!("seed{seed}-{}-{}", cell.regularizer, cell.curation);
        let tr = extract_embeddings(&out.model, train, &out.transform, probe.source, &id)?;
        let te = extract_embeddings(&out.model, test, &out.transform, probe.source, &id)?;
        let skipped = out.epochs.iter().map(|e| e.skipped).sum();
        Ok((knn_probe(&tr, &te, probe.k)?, out.threshold.map(|t| t.tau_frd), skipped))
    });
    let (accuracy, threshold, skipped_steps) = match run {
        Ok((acc, threshold, skipped)) => (Ok(acc), threshold, skipped),
        Err(e) => (Err(e.to_string()), None, 0),
    };
    AblationRow {
        cell,
        seed,
        accuracy,
        threshold,
        skipped_steps,
        dataset_fingerprint: fingerprint.to_string(),
    }
}

/// Pretrains and k-NN-probes every cell for every seed, on up to `jobs`
/// threads. A failing cell is recorded with its error and the grid
/// continues. Cells sharing a seed share initialization, batch order and
/// augmentation draws. Rows come back in grid order (seed-major) whatever
/// the completion order; `on_row` sees them as they finish.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    train: &ImageDataset,
    test: &ImageDataset,
    cells: &[AblationCell],
    seeds: &[u64],
    base: &TrainConfig,
    probe: &ProbeSettings,
    jobs: usize,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Contract(
            "ablation grid needs at least one cell and one seed".into(),
        ));
    }
    let fingerprint = train.fingerprint();
    let work: Vec<(u64, AblationCell)> = seeds.iter().flat_map(|&s| cells.iter().map(move |&c| (s, c))).collect();
    let mut rows: Vec<Option<AblationRow>> = vec![None; work.len()];
    if jobs <= 1 {
        for (i, &(seed, cell)) in work.iter().enumerate() {
            let row = run_cell(train, test, cell, seed, base, probe, &fingerprint);
            on_row(&row);
            rows[i] = Some(row);
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(work.len()) {
                let tx = tx.clone();
                let (next, work, fingerprint) = (&next, &work, &fingerprint);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(seed, cell)) = work.get(i) else { break };
                    let row = run_cell(train, test, cell, seed, base, probe, fingerprint);
                    if tx.send((i, row)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, row) in rx {
                on_row(&row);
                rows[i] = Some(row);
            }
        });
    }
    Ok(rows.into_iter().map(|r| r.expect("every cell ran")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::calibrate_threshold;
    use crate::data::make_synthetic;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 16,
            base_lr: 0.1,
            encoder: EncoderConfig {
                kind: EncoderKind::Mlp,
                hidden_dim: 16,
                projection_dim: 8,
                ..EncoderConfig::default()
            },
            curation: CurationConfig {
                calibration_epoch: 2,
                ..CurationConfig::default()
            },
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            base_lr: 0.4,
            epochs: 200,
            warmup_epochs: 30,
            ..TrainConfig::desk()
        };
        assert_eq!(lr_at(&cfg, 29), 0.4);
        assert!((lr_at(&cfg, 0) - 0.4 / 30.0).abs() < 1e-15);
        assert!((lr_at(&cfg, 30) - 0.4).abs() < 1e-15);
        assert!((lr_at(&cfg, 115) - 0.2).abs() < 1e-12);
        let last = 0.4 * 0.5 * (1.0 + (PI * 169.0 / 170.0).cos());
        assert!((lr_at(&cfg, 199) - last).abs() < 1e-15);
        assert!(lr_at(&cfg, 199) < 1e-3);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let bad = TrainConfig {
            epochs: 5,
            ..TrainConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn setup(seed: u64) -> (ImageDataset, ModelParams, TransformSpec) {
        let ds = make_synthetic(4, 8, 8, seed).unwrap();
        let cfg = tiny_config();
        let model = ModelParams::init(&resolve_encoder(&cfg, &ds)).unwrap();
        (ds.clone(), model, resolve_transform(&cfg, &ds))
    }

    #[test]
    fn skipped_step_leaves_state_untouched() {
        let (ds, mut model, spec) = setup(1);
        let cfg = tiny_config();
        let mut opt = Sgd::new(&model, 0.9, 1e-4);
        let idx: Vec<usize> = (0..16).collect();
        let pair = make_pair(&ds, &idx, &spec, 5).unwrap();
        // Move the optimizer off its zero state first.
        let warm = StepContext {
            epoch: 1,
            batch_index: 0,
            lr: 0.1,
            loss: &cfg.loss,
            curation: &cfg.curation,
            score: false,
            threshold: None,
        };
        train_step(&mut model, &mut opt, &pair, || unreachable!(), &warm).unwrap();
        let (m0, o0) = (model.clone(), opt.clone());
        let t = calibrate_threshold(&[-1.0], 2).unwrap();
        let ctx = StepContext {
            score: true,
            threshold: Some(&t),
            ..warm
        };
        let recs = train_step(&mut model, &mut opt, &pair, || make_pair(&ds, &idx, &spec, 6), &ctx).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].action, StepAction::Reaugment);
        assert_eq!(recs[1].action, StepAction::Skipped);
        assert_eq!(model, m0);
        assert_eq!(opt, o0);

        let t = calibrate_threshold(&[f64::MAX], 2).unwrap();
        let ctx = StepContext {
            threshold: Some(&t),
            ..ctx
        };
        let recs = train_step(&mut model, &mut opt, &pair, || unreachable!(), &ctx).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].action, StepAction::Update);
        assert_ne!(model, m0);
    }

    #[test]
    fn pretrain_calibrates_and_gates() {
        let ds = make_synthetic(4, 16, 8, 2).unwrap();
        let cfg = tiny_config();
        let out = pretrain(&ds, &cfg, None, &mut |_| {}).unwrap();
        let t = out.threshold.as_ref().unwrap();
        let cal: Vec<f64> = out
            .records
            .iter()
            .filter(|r| r.epoch == 2)
            .map(|r| r.frd_score.unwrap())
            .collect();
        assert_eq!(t.per_batch_scores, cal);
        assert_eq!(t.tau_frd, cal.iter().sum::<f64>() / cal.len() as f64);
        for r in &out.records {
            assert_eq!(r.decision.is_some(), r.epoch > 2);
            assert_eq!(r.frd_score.is_some(), r.epoch >= 2);
        }
        let off = TrainConfig {
            curation: CurationConfig {
                enabled: false,
                ..cfg.curation
            },
            ..cfg
        };
        let out = pretrain(&ds, &off, None, &mut |_| {}).unwrap();
        assert!(out.threshold.is_none());
        assert!(out
            .records
            .iter()
            .all(|r| r.decision.is_none() && r.action == StepAction::Update));
    }

    #[test]
    fn metrics_are_deterministic() {
        let ds = make_synthetic(4, 16, 8, 3).unwrap();
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        pretrain(&ds, &cfg, Some(&a), &mut |_| {}).unwrap();
        pretrain(&ds, &cfg, Some(&b), &mut |_| {}).unwrap();
        let ma = std::fs::read(metrics_path(&a)).unwrap();
        assert_eq!(ma, std::fs::read(metrics_path(&b)).unwrap());
        let text = String::from_utf8(ma).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert!(final_checkpoint_path(&a).exists());
    }

    #[test]
    fn ablation_failed_cell_is_recorded() {
        let ds = make_synthetic(4, 16, 8, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_config()
        };
        let cells = AblationCell::grid(&[RegularizerKind::Huber, RegularizerKind::None], &[true, false]);
        assert_eq!(cells.len(), 4);
        let probe = ProbeSettings {
            k: 1000,
            ..ProbeSettings::default()
        };
        let rows = run_ablation(&ds, &ds, &cells[..1], &[0], &cfg, &probe, 1, &mut |_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].accuracy.is_err());
        assert!(run_ablation(&ds, &ds, &[], &[0], &cfg, &probe, 1, &mut |_| {}).is_err());
    }

    #[test]
    fn parallel_ablation_matches_sequential() {
        let ds = make_synthetic(3, 12, 8, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 12,
            ..tiny_config()
        };
        let cells = AblationCell::grid(&[RegularizerKind::Huber, RegularizerKind::None], &[true, false]);
        let probe = ProbeSettings::default();
        let seq = run_ablation(&ds, &ds, &cells, &[0, 1], &cfg, &probe, 1, &mut |_| {}).unwrap();
        let par = run_ablation(&ds, &ds, &cells, &[0, 1], &cfg, &probe, 3, &mut |_| {}).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 8);
        assert!(seq.iter().all(|r| r.accuracy.is_ok()));
    }
}
