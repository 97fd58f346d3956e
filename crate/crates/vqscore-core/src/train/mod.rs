//! End-to-end training: seeded initialization, a held-out validation split,
//! per-batch backpropagation with Adam updates, and per-epoch history. Runs
//! are bitwise deterministic for a given corpus, configuration, and seed.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamError, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION, MAGIC,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QualityGrade, VideoRecord};
use crate::loss::{batch_loss, LossConfig, LossError};
use crate::metrics::{auc, is_high_quality, pnr, Pnr};
use crate::model::{bind_params, forward_record, ModelConfig, ModelError, ModelParams};
use crate::synth::splitmix64;
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

const INIT_STREAM: u64 = 0x696e69745f706172;
const SPLIT_STREAM: u64 = 0x76616c5f73706c69;
const SHUFFLE_STREAM: u64 = 0x73687566666c6521;
const DROPOUT_STREAM: u64 = 0x64726f706f757421;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration invalid: {0}")]
    Config(String),
    #[error("training corpus unusable: {0}")]
    Corpus(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optimizer(#[from] AdamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Fraction of the corpus held out for per-epoch validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            dropout: 0.1,
            batch_size: 32,
            epochs: 20,
            loss: LossConfig::default(),
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate = {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!(
                "dropout = {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config(format!(
                "val_fraction = {} must lie in [0, 1)",
                self.val_fraction
            )));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One epoch of history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean combined loss per training record.
    pub train_loss: f64,
    /// Validation ranking metrics; absent when the split is empty or the
    /// metric is undefined on it.
    pub val_pnr: Option<Pnr>,
    pub val_auc: Option<f64>,
    /// Batches whose pairwise term vanished for want of comparable pairs.
    pub degenerate_pair_batches: usize,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub state: AdamState<f32>,
    pub history: Vec<EpochStats>,
    /// The training split carried a single grade; the run optimized the
    /// pointwise term only.
    pub pairwise_degenerate: bool,
    /// Corpus indices held out for validation.
    pub val_indices: Vec<usize>,
}

/// Trains from scratch on a graded corpus.
pub fn train(
    corpus: &[VideoRecord],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    model_config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Corpus("no records".into()));
    }
    for r in corpus {
        if r.grade.is_none() {
            return Err(TrainError::Corpus(format!("record '{}' has no grade", r.id)));
        }
        let (d_t, d_f) = r.dims();
        if d_t != model_config.d_t || d_f != model_config.d_f {
            return Err(TrainError::Corpus(format!(
                "record '{}' dims ({d_t}, {d_f}) against model ({}, {})",
                r.id, model_config.d_t, model_config.d_f
            )));
        }
    }

    let seed = config.seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ INIT_STREAM));
    let mut params = ModelParams::<f32>::init(model_config.clone(), &mut init_rng)?;
    let mut state = AdamState::new(&params);

    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ SPLIT_STREAM));
    indices.shuffle(&mut split_rng);
    let val_count = (corpus.len() as f64 * config.val_fraction).floor() as usize;
    let (val_indices, train_indices) = indices.split_at(val_count);
    if train_indices.is_empty() {
        return Err(TrainError::Corpus(
            "validation split leaves no training records".into(),
        ));
    }

    let first_grade = corpus[train_indices[0]].grade;
    let pairwise_degenerate = train_indices
        .iter()
        .all(|&i| corpus[i].grade == first_grade);

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ DROPOUT_STREAM));
    let mut order = train_indices.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(splitmix64(seed ^ SHUFFLE_STREAM ^ epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut degenerate_pair_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::training(dropout_rng);
            let step = train_batch(
                &mut tape, &mut params, &mut state, corpus, chunk, model_config, config,
            );
            dropout_rng = tape.into_dropout_rng().expect("training tape keeps its rng");
            let batch_loss_value = step?;
            loss_sum += batch_loss_value.0 * chunk.len() as f64;
            if batch_loss_value.1 {
                degenerate_pair_batches += 1;
            }
        }

        let (val_pnr, val_auc) = validate_split(corpus, val_indices, &params, model_config)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_indices.len() as f64,
            val_pnr,
            val_auc,
            degenerate_pair_batches,
        });
    }

    Ok(TrainOutput {
        params,
        state,
        history,
        pairwise_degenerate,
        val_indices: val_indices.to_vec(),
    })
}

/// Forward, backward, and optimizer update for one batch. Returns the batch
/// loss and whether its pairwise term was degenerate.
fn train_batch(
    tape: &mut Tape<f32>,
    params: &mut ModelParams<f32>,
    state: &mut AdamState<f32>,
    corpus: &[VideoRecord],
    chunk: &[usize],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(f64, bool), TrainError> {
    let nodes = bind_params(tape, params, true);
    let mut scores = Vec::with_capacity(chunk.len());
    let mut grades = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let fwd = forward_record(tape, &nodes, model_config, &corpus[i], config.dropout)?;
        scores.push(fwd.score);
        grades.push(corpus[i].grade.expect("pre-validated"));
    }
    let loss = batch_loss(tape, &scores, &grades, &config.loss)?;
    let loss_value = tape.item(loss.total)?.as_f64();

    let grads = tape.backward(loss.total)?;
    let ordered: Vec<Tensor<f32>> = nodes
        .ordered
        .iter()
        .map(|id| grads.get(*id).expect("bound trainable leaf").clone())
        .collect();
    adam_step(params, &ordered, state, config.learning_rate)?;
    Ok((loss_value, loss.degenerate_pairs))
}

/// Inference scores and grades over a set of corpus indices.
pub fn score_split(
    corpus: &[VideoRecord],
    indices: &[usize],
    params: &ModelParams<f32>,
    model_config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<QualityGrade>), TrainError> {
    let mut scores = Vec::with_capacity(indices.len());
    let mut grades = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut tape = Tape::new();
        let nodes = bind_params(&mut tape, params, false);
        let fwd = forward_record(&mut tape, &nodes, model_config, &corpus[i], 0.0)?;
        scores.push(tape.item(fwd.score)?.as_f64());
        grades.push(
            corpus[i]
                .grade
                .ok_or_else(|| TrainError::Corpus(format!("record '{}' has no grade", corpus[i].id)))?,
        );
    }
    Ok((scores, grades))
}

fn validate_split(
    corpus: &[VideoRecord],
    indices: &[usize],
    params: &ModelParams<f32>,
    model_config: &ModelConfig,
) -> Result<(Option<Pnr>, Option<f64>), TrainError> {
    if indices.is_empty() {
        return Ok((None, None));
    }
    let (scores, grades) = score_split(corpus, indices, params, model_config)?;
    let val_pnr = pnr(&grades, &scores).ok();
    let positives: Vec<bool> = grades.iter().map(|&g| is_high_quality(g)).collect();
    let val_auc = auc(&positives, &scores).ok();
    Ok((val_pnr, val_auc))
}
