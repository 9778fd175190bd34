//! Composite-loss training, early stopping, metrics and grid search.

use std::io::Write;
use std::path::{Path, PathBuf};

use prockt_autodiff::gradcheck::{check_params, GradCheckReport, FD_EPS};
use prockt_autodiff::{Adam, AdamConfig, AutodiffError, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Batch;
use crate::kt_models::{random_batch, trim, Backbone, KtModel, ModelConfig, ModelError, Variant};
use crate::seeds;

pub const LR_GRID: [f64; 4] = [5e-3, 1e-3, 5e-4, 1e-4];
pub const DROPOUT_GRID: [f64; 4] = [0.5, 0.3, 0.1, 0.05];
pub const BATCH_SIZE: usize = 16;
pub const PATIENCE: usize = 10;
pub const MAX_EPOCHS: usize = 200;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const SEED: u64 = 42;
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}; rows {sources:?}{}", .dump.as_ref().map(|p| format!(", dumped to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        sources: Vec<(String, usize)>,
        dump: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("labels and scores differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("no predictions")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub dropout: f64,
    pub lr_grid: Vec<f64>,
    pub dropout_grid: Vec<f64>,
    /// Optional extra grid axis over `alpha`.
    pub alpha_grid: Option<Vec<f64>>,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Where to write the offending batch if the loss goes non-finite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lr: 1e-3,
            dropout: 0.1,
            lr_grid: LR_GRID.to_vec(),
            dropout_grid: DROPOUT_GRID.to_vec(),
            alpha_grid: None,
            batch_size: BATCH_SIZE,
            patience: PATIENCE,
            max_epochs: MAX_EPOCHS,
            seed: SEED,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.lr_grid.is_empty() || self.dropout_grid.is_empty() {
            return bad("grids must be non-empty");
        }
        if self.alpha_grid.as_ref().is_some_and(|g| g.is_empty() || g.iter().any(|a| !(*a >= 0.0))) {
            return bad("alpha grid must be non-empty and non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// `BCE(r) + alpha · Σ_d MSE_d(mp)` on the tape. `r_pred` has `cells`
/// entries; `mp_pred` has `cells × 4` with the dimension on the last axis.
/// MP targets and masks are interleaved the same way.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss_on_tape(
    tape: &mut Tape,
    r_pred: Var,
    mp_pred: Option<Var>,
    r_gt: &[f64],
    valid_mask: &[f64],
    mp_gt: &[f64],
    mp_mask: &[f64],
    alpha: f64,
) -> Result<Var, AutodiffError> {
    let bce = tape.bce(r_pred, r_gt, valid_mask)?;
    let Some(mp) = mp_pred else {
        return Ok(bce.var);
    };
    let rank = tape.shape(mp).len();
    let mut total: Option<Var> = None;
    for d in 0..4 {
        let pred = tape.slice(mp, rank - 1, d, 1)?;
        let targets: Vec<f64> = mp_gt.iter().skip(d).step_by(4).copied().collect();
        let mask: Vec<f64> = mp_mask
            .iter()
            .skip(d)
            .step_by(4)
            .zip(valid_mask)
            .map(|(m, v)| m * v)
            .collect();
        let mse = tape.masked_mse(pred, &targets, &mask)?.var;
        total = Some(match total {
            Some(t) => tape.add(t, mse)?,
            None => mse,
        });
    }
    let mp_term = tape.scale(total.expect("four dimensions"), alpha);
    tape.add(bce.var, mp_term)
}

/// Plain-number form of the composite loss.
pub fn composite_loss(
    r_gt: &[f64],
    r_pred: &[f64],
    mp_gt: &[f64],
    mp_pred: &[f64],
    mp_mask: &[f64],
    valid_mask: &[f64],
    alpha: f64,
) -> Result<f64, AutodiffError> {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(r_pred.to_vec()));
    let mp = if mp_pred.is_empty() {
        None
    } else {
        Some(tape.constant(Tensor::new(vec![r_pred.len(), 4], mp_pred.to_vec())?))
    };
    let loss = composite_loss_on_tape(&mut tape, r, mp, r_gt, valid_mask, mp_gt, mp_mask, alpha)?;
    tape.value(loss).item()
}

/// Forward pass plus composite loss for one batch.
pub fn batch_loss<R: rand::Rng + ?Sized>(
    model: &KtModel,
    store: &prockt_autodiff::ParamStore,
    tape: &mut Tape,
    batch: &Batch,
    alpha: f64,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let out = model.forward_vars(store, tape, batch, rng)?;
    let (n, t, len) = (batch.num_sequences, batch.max_len, out.len);
    let r_gt = trim(&batch.targets_correct, n, t, len, 1);
    let valid = trim(&batch.valid_mask, n, t, len, 1);
    let mp_gt = trim(&batch.targets_mp, n, t, len, 4);
    let mp_mask = trim(&batch.target_mp_mask, n, t, len, 4);
    Ok(composite_loss_on_tape(tape, out.r, out.mp, &r_gt, &valid, &mp_gt, &mp_mask, alpha)?)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Rank-statistic AUC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, tied scores sharing
/// their average rank.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::Length(labels.len(), scores.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        pos_rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of predictions with `(score >= 0.5) == label`.
pub fn acc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::Length(labels.len(), scores.len()));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = labels
        .iter()
        .zip(scores)
        .filter(|(&l, &s)| (s >= ACC_THRESHOLD) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `NaN` when undefined (single-class labels).
    pub auc: f64,
    pub acc: f64,
    pub n_predictions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mp_mse: Option<[f64; 4]>,
}

/// Metrics over every supervised position of `batches`.
pub fn evaluate(model: &KtModel, batches: &[Batch]) -> Result<Metrics, ModelError> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut se = [0.0; 4];
    let mut cnt = [0.0; 4];
    for b in batches {
        let p = model.predict(b)?;
        for cell in 0..b.num_sequences * b.max_len {
            if b.valid_mask[cell] == 0.0 {
                continue;
            }
            labels.push(b.targets_correct[cell] > 0.5);
            scores.push(p.r_pred[cell]);
            if let Some(mp) = &p.mp_pred {
                for d in 0..4 {
                    let k = cell * 4 + d;
                    if b.target_mp_mask[k] > 0.0 {
                        se[d] += (mp[k] - b.targets_mp[k]).powi(2);
                        cnt[d] += 1.0;
                    }
                }
            }
        }
    }
    let mp_mse = model
        .store
        .by_name("mp_head.w")
        .map(|_| std::array::from_fn(|d| if cnt[d] > 0.0 { se[d] / cnt[d] } else { f64::NAN }));
    Ok(Metrics {
        auc: auc(&labels, &scores).unwrap_or(f64::NAN),
        acc: acc(&labels, &scores).unwrap_or(f64::NAN),
        n_predictions: labels.len(),
        mp_mse,
    })
}

// ---------------------------------------------------------------------------
// early stopping and the training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored AUC has not strictly improved for `patience`
/// consecutive epochs. `NaN` never counts as an improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, auc: f64) -> StopDecision {
        if auc > self.best {
            self.best = auc;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: KtModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub epochs_trained: usize,
}

fn dump_batch(dir: &Path, epoch: usize, index: usize, batch: &Batch) -> Option<PathBuf> {
    let path = dir.join(format!("nan_batch_e{epoch}_b{index}.json"));
    let value = serde_json::json!({
        "sources": batch.sources,
        "question_ids": batch.question_ids,
        "concept_ids": batch.concept_ids,
        "correctness": batch.correctness,
        "mp_inputs": batch.mp_inputs,
        "targets_correct": batch.targets_correct,
        "targets_mp": batch.targets_mp,
        "target_mp_mask": batch.target_mp_mask,
        "valid_mask": batch.valid_mask,
    });
    std::fs::create_dir_all(dir).ok()?;
    std::fs::write(&path, value.to_string()).ok()?;
    Some(path)
}

/// Adam on the composite loss with per-epoch batch shuffling and early
/// stopping on validation AUC. The model's own dropout rate is used.
pub fn train(mut model: KtModel, train: &[Batch], val: &[Batch], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds::sub_seed(cfg.seed, seeds::DROPOUT));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::sub_seed(cfg.seed, seeds::SHUFFLE));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut best_val = evaluate(&model, val)?;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for &bi in &order {
            let batch = &train[bi];
            if batch.num_supervised() == 0 {
                continue;
            }
            let mut tape = Tape::with_training(true);
            let loss = batch_loss(&model, &model.store, &mut tape, batch, cfg.alpha, &mut dropout_rng)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                let dump = cfg.dump_dir.as_deref().and_then(|d| dump_batch(d, epoch, bi, batch));
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: value,
                    sources: batch.sources.clone(),
                    dump,
                });
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
            loss_sum += value;
            loss_batches += 1;
        }
        let m = evaluate(&model, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_batches.max(1) as f64,
            val_auc: m.auc,
            val_acc: m.acc,
        });
        log::debug!("epoch {epoch}: loss {:.5} val_auc {:.5}", loss_sum / loss_batches.max(1) as f64, m.auc);
        match stopper.observe(epoch, m.auc) {
            StopDecision::Improved => {
                best_model = model.clone();
                best_val = m;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        epochs_trained: history.len(),
        history,
        best_epoch: stopper.best_epoch,
        best_val,
    })
}

// ---------------------------------------------------------------------------
// grid search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub best_epoch: usize,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
    pub outcome: TrainOutcome,
}

/// Every `(lr, dropout[, alpha])` combination, in grid order.
pub fn grid_cells(cfg: &TrainConfig) -> Vec<(f64, f64, f64)> {
    let alphas = cfg.alpha_grid.clone().unwrap_or_else(|| vec![cfg.alpha]);
    let mut out = Vec::new();
    for &lr in &cfg.lr_grid {
        for &dropout in &cfg.dropout_grid {
            for &alpha in &alphas {
                out.push((lr, dropout, alpha));
            }
        }
    }
    out
}

/// Trains one model per grid cell (in parallel) and keeps the one with the
/// highest validation AUC; ties go to the earlier cell. `factory` builds a
/// fresh model for a dropout rate.
pub fn grid_search<F>(factory: F, train_batches: &[Batch], val: &[Batch], cfg: &TrainConfig) -> Result<GridResult, TrainError>
where
    F: Fn(f64) -> Result<KtModel, ModelError> + Sync,
{
    cfg.validate()?;
    let cells = grid_cells(cfg);
    let outcomes: Vec<Result<TrainOutcome, TrainError>> = cells
        .par_iter()
        .map(|&(lr, dropout, alpha)| {
            let cell_cfg = TrainConfig {
                lr,
                dropout,
                alpha,
                ..cfg.clone()
            };
            train(factory(dropout)?, train_batches, val, &cell_cfg)
        })
        .collect();
    let mut table = Vec::with_capacity(cells.len());
    let mut kept = Vec::with_capacity(cells.len());
    for (&(lr, dropout, alpha), o) in cells.iter().zip(outcomes) {
        let o = o?;
        table.push(GridCell {
            lr,
            dropout,
            alpha,
            val_auc: o.best_val.auc,
            val_acc: o.best_val.acc,
            best_epoch: o.best_epoch,
            epochs_trained: o.epochs_trained,
        });
        kept.push(o);
    }
    let mut best = 0;
    for (i, c) in table.iter().enumerate() {
        if c.val_auc > table[best].val_auc || table[best].val_auc.is_nan() && !c.val_auc.is_nan() {
            best = i;
        }
    }
    let outcome = kept.swap_remove(best);
    Ok(GridResult {
        cells: table,
        best,
        outcome,
    })
}

// ---------------------------------------------------------------------------
// full-model gradient check
// ---------------------------------------------------------------------------

pub const TOY_STUDENTS: usize = 2;
pub const TOY_STEPS: usize = 8;

/// Central-difference check of the composite-loss gradient with respect to
/// every parameter of a small model on a random `2 × 8` batch.
pub fn gradcheck_model(backbone: Backbone, variant: Variant, seed: u64) -> Result<GradCheckReport, TrainError> {
    let (nq, nc) = (6, 3);
    let cfg = ModelConfig {
        embed_dim: 8,
        attention_heads: 2,
        max_len: TOY_STEPS,
        dropout: 0.0,
        seed,
        ..ModelConfig::new(backbone, variant, nq, nc)
    };
    let model = KtModel::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = random_batch(&mut rng, &[TOY_STEPS; TOY_STUDENTS], TOY_STEPS, nq, nc);
    let mut store = model.store.clone();
    let report = check_params(&mut store, FD_EPS, |tape, store| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        batch_loss(&model, store, tape, &batch, DEFAULT_ALPHA, &mut rng).map_err(|e| match e {
            ModelError::Autodiff(e) => e,
            other => AutodiffError::InvalidArgument(other.to_string()),
        })
    })?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: Variant,
    pub backbone: Backbone,
    pub lr: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub test_auc: f64,
    pub test_acc: f64,
    pub epochs_trained: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_metrics_json(path: &Path, metrics: &RunMetrics) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut text = String::from("epoch,train_loss,val_auc,val_acc\n");
    for r in history {
        text.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_auc, r.val_acc));
    }
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[false, true], &[0.1, 0.9]), Ok(1.0));
        assert_eq!(auc(&[false, true], &[0.9, 0.1]), Ok(0.0));
        assert_eq!(auc(&[false, true, true, false], &[0.3; 4]), Ok(0.5));
        assert_eq!(auc(&[true, true], &[0.1, 0.2]), Err(MetricError::SingleClass));
        assert_eq!(auc(&[true], &[0.1, 0.2]), Err(MetricError::Length(1, 2)));
    }

    #[test]
    fn acc_boundary() {
        assert_eq!(acc(&[true, false], &[0.9, 0.1]), Ok(1.0));
        assert_eq!(acc(&[true, false], &[0.5, 0.5]), Ok(0.5));
        assert_eq!(acc(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn hand_computed_loss() {
        let l = composite_loss(&[1.0], &[0.5], &[0.6; 4], &[0.5; 4], &[1.0; 4], &[1.0], 0.5).unwrap();
        assert!((l - (std::f64::consts::LN_2 + 0.5 * 0.04)).abs() < 1e-9);
        assert!((l - 0.713147).abs() < 1e-6);
    }

    #[test]
    fn alpha_zero_is_plain_bce() {
        let r_gt = [1.0, 0.0, 1.0];
        let r = [0.7, 0.2, 0.4];
        let valid = [1.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(r.to_vec()));
        let bce = tape.bce(p, &r_gt, &valid).unwrap();
        let bce = tape.value(bce.var).item().unwrap();
        let l = composite_loss(&r_gt, &r, &[0.3; 12], &[0.9; 12], &[1.0; 12], &valid, 0.0).unwrap();
        assert_eq!(l.to_bits(), bce.to_bits());
        let masked = composite_loss(&r_gt, &r, &[0.3; 12], &[0.9; 12], &[0.0; 12], &valid, 3.0).unwrap();
        assert_eq!(masked.to_bits(), bce.to_bits());
    }

    #[test]
    fn early_stopping_plateau() {
        let mut s = EarlyStopping::new(3);
        assert_eq!(s.observe(1, 0.6), StopDecision::Improved);
        assert_eq!(s.observe(2, 0.7), StopDecision::Improved);
        assert_eq!(s.observe(3, 0.7), StopDecision::Continue);
        assert_eq!(s.observe(4, f64::NAN), StopDecision::Continue);
        assert_eq!(s.observe(5, 0.65), StopDecision::Stop);
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn sixteen_cells() {
        let cells = grid_cells(&TrainConfig::default());
        assert_eq!(cells.len(), 16);
        let mut uniq = cells.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 16);
        let cfg = TrainConfig {
            alpha_grid: Some(vec![0.0, 0.5]),
            ..TrainConfig::default()
        };
        assert_eq!(grid_cells(&cfg).len(), 32);
    }
}
