//! Training loop with best-validation selection, batched evaluation with
//! per-sample vote streams, and the ablation harness.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::checkpoint;
use crate::data::{split, Batch, BinocularSample, Dataset, Split, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::kv_fields;
use crate::losses::{batch_loss, LossBreakdown};
use crate::metrics::{CalibrationReport, EvalRecord};
use crate::model::{attention_map, vote_tensor, AgeScaler, Eye, VVit, VVitConfig, VoteBundle};
use crate::nn::Module;
use crate::rng::{hash_str, Rng};
use crate::scalar::Scalar;
use crate::tensor::optim::{Adam, Sgd};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Drives the split, initialization, batch order and every dropout mask.
    pub seed: u64,
    /// Validate (and consider for selection) every this many epochs; the
    /// last epoch is always validated.
    pub eval_every: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Random flips and quarter turns of each training image.
    pub augment: bool,
    /// Where to write the selected model; empty for none.
    pub checkpoint: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 1,
            train_frac: DEFAULT_TRAIN_FRAC,
            val_frac: DEFAULT_VAL_FRAC,
            augment: true,
            checkpoint: String::new(),
        }
    }
}

impl KvConfig for TrainConfig {
    kv_fields!(TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        optimizer,
        seed,
        eval_every,
        train_frac,
        val_frac,
        augment,
        checkpoint,
    });

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate = {} must be a nonnegative number",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

enum Optimizer<T: Scalar> {
    Sgd(Sgd),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    fn step(&mut self, model: &mut VVit<T>) {
        let params = model.params_mut().into_iter().map(|(_, p)| p);
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::Adam(o) => o.step(params),
        }
    }
}

/// Convert an `f64` batch tensor to the model's precision.
fn cast<T: Scalar>(t: &Tensor<f64>) -> Result<Tensor<T>> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| T::lit(v)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_brier: Option<f64>,
}

pub struct TrainOutcome<T: Scalar> {
    /// Lowest validation Brier (or the last epoch without a validation set).
    pub model: VVit<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_brier: Option<f64>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Per-epoch training loss components as CSV.
    pub fn loss_csv(&self) -> String {
        let mut s = format!("{}\n", LossBreakdown::CSV_HEADER);
        for e in &self.log {
            s.push_str(&e.train.csv_row(e.epoch));
            s.push('\n');
        }
        s
    }
}

/// Trains a fresh model on `train` and selects the epoch with the lowest
/// Brier score on `val`.
pub fn train<T: Scalar>(
    model_cfg: &VVitConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if train.image != model_cfg.image_shape() {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match the model's {:?}",
            train.image,
            model_cfg.image_shape()
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut model = VVit::<T>::new(model_cfg, &mut root.derive(1))?;
    model.age_scaler = AgeScaler::fit(&train.ages());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);

    let mut best: Option<(f64, usize, VVit<T>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = root.derive(2).derive(epoch as u64);
        rng.shuffle(&mut order);
        let mut aug_rng = root.derive(4).derive(epoch as u64);
        let mut parts = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&BinocularSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let mut batch = Batch::new(train.image, &samples, &model.age_scaler)?;
            if cfg.augment {
                batch.augment(train.image, &mut aug_rng)?;
            }
            let (target, fellow) = (cast::<T>(&batch.target)?, cast::<T>(&batch.fellow)?);
            let fellow = model_cfg.use_binocular.then_some(&fellow);
            let out = model.forward(&target, fellow, &mut rng, true)?;
            let (loss, breakdown) = batch_loss(&model, &out, &batch.targets)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            loss.backward()?;
            opt.step(&mut model);
            parts.push((breakdown, chunk.len()));
        }
        let train_loss = LossBreakdown::weighted_mean(&parts);

        let validate = !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let val_brier = if validate {
            let records = evaluate(&model, val, cfg.seed, cfg.batch_size)?;
            Some(crate::metrics::brier(&records)?)
        } else {
            None
        };
        if let Some(b) = val_brier {
            if best.as_ref().is_none_or(|(bb, _, _)| b < *bb) {
                best = Some((b, epoch, model.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            train: train_loss,
            val_brier,
        });
    }

    let (best_val_brier, best_epoch, model) = match best {
        Some((b, e, m)) => (Some(b), e, m),
        None => (None, cfg.epochs, model),
    };
    if !cfg.checkpoint.is_empty() {
        checkpoint::save(&model, PathBuf::from(&cfg.checkpoint))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_brier,
    })
}

/// Model prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub bundle: VoteBundle,
    /// Age in years, when the metadata heads exist.
    pub age_years: Option<f64>,
    pub sex_logits: Option<[f64; 2]>,
}

/// Inference over a dataset. The backbone runs batched without dropout;
/// each sample's votes use a stream keyed by `(seed, id)`, so predictions
/// do not depend on batch composition or order.
pub fn predict<T: Scalar>(model: &VVit<T>, ds: &Dataset, seed: u64, batch_size: usize) -> Result<Vec<Prediction>> {
    let cfg = &model.config;
    if ds.image != cfg.image_shape() {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match the model's {:?}",
            ds.image,
            cfg.image_shape()
        )));
    }
    let base = Rng::new(seed).derive(3);
    let n_votes = cfg.effective_votes();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&BinocularSample> = chunk.iter().collect();
        let batch = Batch::new(ds.image, &refs, &model.age_scaler)?;
        let (target, fellow) = (cast::<T>(&batch.target)?, cast::<T>(&batch.fellow)?);
        let fellow = cfg.use_binocular.then_some(&fellow);
        // the backbone draws no randomness when not training
        let rep = model.represent(&target, fellow, &mut base.clone(), false)?;
        let d = rep.z.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let mut rng = base.derive(hash_str(&s.id));
            let z = rep.z.slice(0, i, i + 1)?.reshape(&[d])?;
            let votes = vote_tensor(&z, &model.glaucoma_head, n_votes, &mut rng, cfg.use_voting)?;
            let bundle = VoteBundle::from_votes(votes.data().iter().map(|v| v.to_f64().unwrap()).collect())?;
            let age_years = match &model.age_head {
                Some(h) => Some(model.age_scaler.to_years(h.forward(&z, &mut rng, false)?.item().to_f64().unwrap())),
                None => None,
            };
            let sex_logits = match &model.sex_head {
                Some(h) => {
                    let l = h.forward(&z, &mut rng, false)?;
                    Some([l.data()[0].to_f64().unwrap(), l.data()[1].to_f64().unwrap()])
                }
                None => None,
            };
            out.push(Prediction {
                id: s.id.clone(),
                bundle,
                age_years,
                sex_logits,
            });
        }
    }
    Ok(out)
}

/// Mean-vote probability against each sample's soft label.
pub fn evaluate<T: Scalar>(model: &VVit<T>, ds: &Dataset, seed: u64, batch_size: usize) -> Result<Vec<EvalRecord>> {
    let preds = predict(model, ds, seed, batch_size)?;
    Ok(preds
        .iter()
        .zip(&ds.samples)
        .map(|(p, s)| EvalRecord::new(crate::model::predict_probability(&p.bundle), s.y_vote))
        .collect())
}

/// Attention argmax for one sample, as a `(row, col)` patch-grid cell.
pub fn attention_argmax(grid: &[f64], grid_width: usize) -> (usize, usize) {
    let i = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    (i / grid_width, i % grid_width)
}

/// For each sample, whether the argmax of the block's `[CLS]` attention over
/// `eye` lands on a patch that overlaps that eye's planted disc.
pub fn attention_on_disc<T: Scalar>(
    model: &VVit<T>,
    ds: &Dataset,
    block: usize,
    eye: Eye,
    batch_size: usize,
) -> Result<Vec<bool>> {
    let mut hits = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&BinocularSample> = chunk.iter().collect();
        let batch = Batch::new(ds.image, &refs, &model.age_scaler)?;
        let (target, fellow) = (cast::<T>(&batch.target)?, cast::<T>(&batch.fellow)?);
        let output = model.forward(&target, Some(&fellow), &mut Rng::new(0), false)?;
        let (_, gw) = output.grid;
        for (i, s) in chunk.iter().enumerate() {
            let (row, col) = attention_argmax(&attention_map(&output, i, block, eye)?, gw);
            let disc = match eye {
                Eye::Target => s.target_disc,
                Eye::Fellow => s.fellow_disc,
            };
            hits.push(disc.overlaps_patch(row, col, model.config.patch_size));
        }
    }
    Ok(hits)
}

/// One seeded run: split, train, evaluate on the test part.
pub struct RunResult<T: Scalar> {
    pub split: Split,
    pub outcome: TrainOutcome<T>,
    pub test_records: Vec<EvalRecord>,
    pub report: CalibrationReport,
}

pub fn run_seed<T: Scalar>(
    model_cfg: &VVitConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    seed: u64,
    num_bins: usize,
    threshold: f64,
) -> Result<RunResult<T>> {
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let parts = split(ds, cfg.train_frac, cfg.val_frac, seed)?;
    let (tr, va, te) = (ds.subset(&parts.train)?, ds.subset(&parts.val)?, ds.subset(&parts.test)?);
    let outcome = train::<T>(model_cfg, &cfg, &tr, &va)?;
    let test_records = evaluate(&outcome.model, &te, seed, cfg.batch_size)?;
    let report = CalibrationReport::evaluate(&test_records, num_bins, threshold)?;
    Ok(RunResult {
        split: parts,
        outcome,
        test_records,
        report,
    })
}

/// Binocular, voting, metadata.
pub type Ablation = (bool, bool, bool);

/// The four configurations compared by default, from plain single-eye to
/// the full model.
pub const DEFAULT_ABLATIONS: [Ablation; 4] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (true, true, true),
];

pub fn validate_ablations(spec: &[Ablation]) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::Config("ablation spec is empty".into()));
    }
    for (i, a) in spec.iter().enumerate() {
        if spec[..i].contains(a) {
            return Err(Error::Config(format!("duplicate ablation triple {a:?}")));
        }
    }
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub flags: Ablation,
    /// `(mean, sd)` over seeds.
    pub recall: (f64, f64),
    pub f1: (f64, f64),
    pub brier: (f64, f64),
    pub auroc: (f64, f64),
    pub ece: (f64, f64),
    pub accuracy: (f64, f64),
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "B,V,M,recall,recall_sd,f1,f1_sd,brier,brier_sd,auroc,auroc_sd,ece,ece_sd,acc,acc_sd";

    pub fn from_reports(flags: Ablation, reports: &[CalibrationReport]) -> Self {
        let col = |f: fn(&CalibrationReport) -> f64| mean_sd(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            flags,
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
            brier: col(|r| r.brier),
            auroc: col(|r| r.auroc),
            ece: col(|r| r.ece),
            accuracy: col(|r| r.accuracy),
        }
    }

    pub fn csv_row(&self) -> String {
        let (b, v, m) = self.flags;
        let mut s = format!("{},{},{}", u8::from(b), u8::from(v), u8::from(m));
        for (mean, sd) in [self.recall, self.f1, self.brier, self.auroc, self.ece, self.accuracy] {
            s.push_str(&format!(",{mean},{sd}"));
        }
        s
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Trains every configuration in `spec` once per seed (the seed sets the
/// split and the initialization) and averages the test metrics.
pub fn run_ablation<T: Scalar>(
    spec: &[Ablation],
    seeds: &[u64],
    base: &VVitConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    num_bins: usize,
    threshold: f64,
) -> Result<Vec<AblationRow>> {
    validate_ablations(spec)?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    spec.iter()
        .map(|&(b, v, m)| {
            let cfg = base.with_ablation(b, v, m);
            let reports = seeds
                .iter()
                .map(|&seed| Ok(run_seed::<T>(&cfg, train_cfg, ds, seed, num_bins, threshold)?.report))
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow::from_reports((b, v, m), &reports))
        })
        .collect()
}
