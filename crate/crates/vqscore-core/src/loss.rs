//! Training objective: pointwise regression onto soft labels mixed with a
//! pairwise margin ranking term over grade-discordant pairs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QualityGrade;
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("predictions ({predictions}) and targets ({targets}) differ in length")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("loss configuration invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Objective weights. `alpha` blends the pointwise term against the pairwise
/// term; `tau` is the ranking margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Penalize the higher-graded item for outscoring the lower-graded one,
    /// the printed form of the ranking term. Off by default: the default
    /// direction rewards score orderings that agree with grade orderings.
    pub literal_hinge: bool,
    /// Divide the pairwise sum by batch size instead of by the number of
    /// comparable pairs.
    pub batch_size_normalization: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            alpha: 0.5,
            literal_hinge: false,
            batch_size_normalization: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(LossError::InvalidConfig(format!(
                "margin tau = {} must be finite and >= 0",
                self.tau
            )));
        }
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidConfig(format!(
                "alpha = {} must lie in [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Mean squared error between predictions and soft labels.
pub fn pointwise_loss(predicted: &[f64], soft_labels: &[f64]) -> Result<f64, LossError> {
    if predicted.len() != soft_labels.len() {
        return Err(LossError::LengthMismatch {
            predictions: predicted.len(),
            targets: soft_labels.len(),
        });
    }
    if predicted.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = predicted.len() as f64;
    Ok(predicted
        .iter()
        .zip(soft_labels)
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / n)
}

/// Pairwise hinge value plus whether the batch had any comparable pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseLoss {
    pub value: f64,
    /// No pair of records had distinct grades; `value` is 0.
    pub degenerate: bool,
    pub comparable_pairs: usize,
}

/// Margin ranking loss over every pair with strictly different grades.
/// Equal-grade pairs contribute nothing; a batch with no comparable pair
/// yields 0 flagged degenerate.
pub fn pairwise_loss(
    predicted: &[f64],
    grades: &[QualityGrade],
    config: &LossConfig,
) -> Result<PairwiseLoss, LossError> {
    config.validate()?;
    if predicted.len() != grades.len() {
        return Err(LossError::LengthMismatch {
            predictions: predicted.len(),
            targets: grades.len(),
        });
    }
    if predicted.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..predicted.len() {
        for j in (i + 1)..predicted.len() {
            let Some((hi, lo)) = order_by_grade(grades[i], grades[j], i, j) else {
                continue;
            };
            pairs += 1;
            sum += hinge(predicted[hi], predicted[lo], config);
        }
    }
    if pairs == 0 {
        return Ok(PairwiseLoss {
            value: 0.0,
            degenerate: true,
            comparable_pairs: 0,
        });
    }
    let denom = if config.batch_size_normalization {
        predicted.len() as f64
    } else {
        pairs as f64
    };
    Ok(PairwiseLoss {
        value: sum / denom,
        degenerate: false,
        comparable_pairs: pairs,
    })
}

/// `(higher_index, lower_index)` by grade, or `None` for equal grades.
fn order_by_grade(
    a: QualityGrade,
    b: QualityGrade,
    ia: usize,
    ib: usize,
) -> Option<(usize, usize)> {
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Some((ia, ib)),
        std::cmp::Ordering::Less => Some((ib, ia)),
        std::cmp::Ordering::Equal => None,
    }
}

fn hinge(f_higher: f64, f_lower: f64, config: &LossConfig) -> f64 {
    let margin = if config.literal_hinge {
        f_higher - f_lower + config.tau
    } else {
        f_lower - f_higher + config.tau
    };
    margin.max(0.0)
}

/// `alpha * point + (1 - alpha) * pair`.
pub fn combined_loss(point: f64, pair: f64, alpha: f64) -> f64 {
    alpha * point + (1.0 - alpha) * pair
}

/// The batch objective as tape nodes, for backpropagation.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    /// `[1]` combined objective, the backward root.
    pub total: NodeId,
    /// `[1]` pointwise term.
    pub point: NodeId,
    /// `[1]` pairwise term (a zero constant when degenerate).
    pub pair: NodeId,
    /// The batch had no grade-discordant pair.
    pub degenerate_pairs: bool,
}

/// Builds the combined objective over per-record score nodes (each `[1]`,
/// from the forward pass) and their grades.
pub fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    scores: &[NodeId],
    grades: &[QualityGrade],
    config: &LossConfig,
) -> Result<BatchLoss, LossError> {
    config.validate()?;
    if scores.len() != grades.len() {
        return Err(LossError::LengthMismatch {
            predictions: scores.len(),
            targets: grades.len(),
        });
    }
    if scores.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = scores.len();
    {
        let preds = tape.concat(scores, 0)?;
        let labels: Vec<F> = grades
            .iter()
            .map(|g| F::from_f64(g.soft_label() as f64))
            .collect();
        let labels = tape.leaf(Tensor::from_parts(vec![n], labels));
        let diff = tape.sub(preds, labels)?;
        let sq = tape.mul(diff, diff)?;
        let point = tape.mean_all(sq)?;

        let mut hinges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let Some((hi, lo)) = order_by_grade(grades[i], grades[j], i, j) else {
                    continue;
                };
                let margin = if config.literal_hinge {
                    tape.sub(scores[hi], scores[lo])?
                } else {
                    tape.sub(scores[lo], scores[hi])?
                };
                let margin = tape.add_scalar(margin, F::from_f64(config.tau))?;
                hinges.push(tape.relu(margin)?);
            }
        }
        let degenerate = hinges.is_empty();
        let pair = if degenerate {
            tape.constant(F::zero())
        } else {
            let stacked = tape.concat(&hinges, 0)?;
            let mean = tape.mean_all(stacked)?;
            if config.batch_size_normalization {
                let rescale = hinges.len() as f64 / n as f64;
                tape.mul_scalar(mean, F::from_f64(rescale))?
            } else {
                mean
            }
        };

        let weighted_point = tape.mul_scalar(point, F::from_f64(config.alpha))?;
        let weighted_pair = tape.mul_scalar(pair, F::from_f64(1.0 - config.alpha))?;
        let total = tape.add(weighted_point, weighted_pair)?;
        Ok(BatchLoss {
            total,
            point,
            pair,
            degenerate_pairs: degenerate,
        })
    }
}
