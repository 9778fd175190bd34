//! End-to-end runs on a prepared dataset: split, batch, train, test.

use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, preprocess, split, Batch, Dataset, DatasetError, Vocab};
use crate::kt_models::{Backbone, KtModel, ModelConfig, Variant};
use crate::seeds;
use crate::training::{evaluate, train, Metrics, TrainConfig, TrainError, TrainOutcome};

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.1;

/// Batched train/validation/test splits sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub max_len: usize,
    pub train: Vec<Batch>,
    pub val: Vec<Batch>,
    pub test: Vec<Batch>,
    pub split_sizes: [usize; 3],
}

/// Preprocesses `data`, splits students with the run seed and batches each
/// split.
pub fn prepare(data: &Dataset, seed: u64, max_len: usize, batch_size: usize) -> Result<Prepared, DatasetError> {
    let (clean, _) = preprocess(data);
    let parts = split(&clean.sequences, seeds::sub_seed(seed, seeds::SPLIT), TEST_FRACTION, VAL_FRACTION)?;
    let vocab = Vocab::from_problems(&clean.problems);
    let batches = |s| make_batches(&clean, s, &vocab, max_len, batch_size);
    Ok(Prepared {
        train: batches(&parts.train)?,
        val: batches(&parts.val)?,
        test: batches(&parts.test)?,
        split_sizes: [parts.train.len(), parts.val.len(), parts.test.len()],
        vocab,
        max_len,
    })
}

/// Model shape knobs that are not part of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub attention_heads: usize,
}

pub fn model_config(p: &Prepared, backbone: Backbone, variant: Variant, shape: ModelShape, dropout: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        embed_dim: shape.embed_dim,
        attention_heads: shape.attention_heads,
        max_len: p.max_len,
        dropout,
        seed: seeds::sub_seed(seed, seeds::INIT),
        ..ModelConfig::new(backbone, variant, p.vocab.num_questions(), p.vocab.num_concepts())
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: Metrics,
}

/// Trains one model with fixed hyperparameters and scores the test split.
pub fn run_once(
    p: &Prepared,
    backbone: Backbone,
    variant: Variant,
    shape: ModelShape,
    cfg: &TrainConfig,
) -> Result<RunResult, TrainError> {
    let model = KtModel::build(model_config(p, backbone, variant, shape, cfg.dropout, cfg.seed))?;
    let outcome = train(model, &p.train, &p.val, cfg)?;
    let test = evaluate(&outcome.model, &p.test)?;
    Ok(RunResult { outcome, test })
}
