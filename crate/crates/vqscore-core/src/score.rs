//! Inference: one record in, a final score plus the per-branch breakdown
//! out. Scoring is a pure function of (record, parameters), so repeated and
//! reordered calls reproduce byte-identical results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VideoRecord;
use crate::metrics::{ranking_report, MetricError, RankingReport};
use crate::model::{bind_params, forward_record, ModelError, ModelParams};
use crate::tensor::{Scalar, Tape, TensorError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("record '{id}': {source}")]
    Record {
        id: String,
        #[source]
        source: Box<ScoreError>,
    },
    #[error("corpus not scorable: {0}")]
    Corpus(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Raw branch logits for one record. Branches absent from the model are
/// omitted from serialized output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BranchScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video_text_match: Option<f64>,
    /// Whole-video/text dot product feeding `video_text_match`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video_text_match_global: Option<f64>,
    /// Mean per-frame/text dot product feeding `video_text_match`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video_text_match_local: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_coherence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_quality: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_quality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub id: String,
    /// Final quality score, strictly inside (0, 1).
    pub score: f64,
    pub branch_scores: BranchScores,
    /// Aggregation weights over the enabled branches, in declaration order;
    /// non-negative and summing to 1.
    pub branch_weights: Vec<f64>,
}

/// Scores one record on a fresh inference tape.
pub fn score_record(
    record: &VideoRecord,
    params: &ModelParams<f32>,
) -> Result<ScoredVideo, ScoreError> {
    let mut tape = Tape::new();
    let nodes = bind_params(&mut tape, params, false);
    let fwd = forward_record(&mut tape, &nodes, &params.config, record, 0.0)?;

    let mut branch_scores = BranchScores::default();
    if let Some(m) = &fwd.matching {
        branch_scores.video_text_match = Some(tape.item(m.combined)?.as_f64());
        branch_scores.video_text_match_global = Some(tape.item(m.global)?.as_f64());
        branch_scores.video_text_match_local = Some(tape.item(m.local)?.as_f64());
    }
    if let Some(c) = fwd.coherence {
        branch_scores.frame_coherence = Some(tape.item(c)?.as_f64());
    }
    if let Some(q) = fwd.frame_quality {
        branch_scores.frame_quality = Some(tape.item(q)?.as_f64());
    }
    if let Some(q) = fwd.text_quality {
        branch_scores.text_quality = Some(tape.item(q)?.as_f64());
    }
    let branch_weights: Vec<f64> = tape
        .value(fwd.weights)
        .data()
        .iter()
        .map(|w| w.as_f64())
        .collect();

    Ok(ScoredVideo {
        id: record.id.clone(),
        score: tape.item(fwd.score)?.as_f64(),
        branch_scores,
        branch_weights,
    })
}

/// Scores records in input order. The first failure aborts the batch,
/// naming the offending record.
pub fn score_corpus(
    records: &[VideoRecord],
    params: &ModelParams<f32>,
) -> Result<Vec<ScoredVideo>, ScoreError> {
    records
        .iter()
        .map(|r| {
            score_record(r, params).map_err(|e| ScoreError::Record {
                id: r.id.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// Scores a graded corpus and assembles ranking metrics with per-branch
/// diagnostics. Requires all four branches enabled and every record graded.
pub fn branch_report(
    records: &[VideoRecord],
    params: &ModelParams<f32>,
) -> Result<RankingReport, ScoreError> {
    if params.config.branches.enabled_count() != 4 {
        return Err(ScoreError::Corpus(
            "branch diagnostics need all four branches enabled".into(),
        ));
    }
    let mut grades = Vec::with_capacity(records.len());
    for r in records {
        grades.push(
            r.grade
                .ok_or_else(|| ScoreError::Corpus(format!("record '{}' has no grade", r.id)))?,
        );
    }
    let scored = score_corpus(records, params)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let logits: Vec<[f64; 4]> = scored
        .iter()
        .map(|s| {
            let b = &s.branch_scores;
            [
                b.video_text_match.expect("all branches enabled"),
                b.frame_coherence.expect("all branches enabled"),
                b.frame_quality.expect("all branches enabled"),
                b.text_quality.expect("all branches enabled"),
            ]
        })
        .collect();
    Ok(ranking_report(&grades, &scores, &logits)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BRANCH_NAMES;
    use crate::model::{BranchMask, ModelConfig};
    use crate::synth::{generate_corpus, SynthConfig};

    fn small_corpus(n: usize) -> Vec<VideoRecord> {
        let config = SynthConfig {
            n_records: n,
            d_t: 12,
            d_f: 12,
            m: 4,
            seed: 3,
            ..SynthConfig::default()
        };
        generate_corpus(&config).unwrap().0
    }

    fn small_model() -> ModelConfig {
        let mut config = ModelConfig::new(12, 12);
        config.d = 8;
        config.n_heads = 2;
        config
    }

    #[test]
    fn zero_model_scores_half_with_uniform_weights() {
        let params = ModelParams::<f32>::zeros(small_model()).unwrap();
        let record = &small_corpus(1)[0];
        let scored = score_record(record, &params).unwrap();
        assert_eq!(scored.score, 0.5);
        assert_eq!(scored.branch_weights, vec![0.25; 4]);
        assert_eq!(scored.branch_scores.video_text_match, Some(0.0));
        assert_eq!(scored.branch_scores.frame_coherence, Some(0.0));
        assert_eq!(scored.branch_scores.frame_quality, Some(0.0));
        assert_eq!(scored.branch_scores.text_quality, Some(0.0));
    }

    #[test]
    fn scoring_is_pure_and_order_preserving() {
        let params = ModelParams::<f32>::seeded(small_model(), 11).unwrap();
        let corpus = small_corpus(6);
        let once = score_corpus(&corpus, &params).unwrap();
        let twice = score_corpus(&corpus, &params).unwrap();
        assert_eq!(once, twice);
        for (record, scored) in corpus.iter().zip(&once) {
            assert_eq!(record.id, scored.id);
            assert!(scored.score > 0.0 && scored.score < 1.0);
            let z: f64 = scored.branch_weights.iter().sum();
            assert!((z - 1.0).abs() < 1e-6, "weight sum {z}");
        }

        let duplicated = vec![corpus[2].clone(), corpus[2].clone()];
        let pair = score_corpus(&duplicated, &params).unwrap();
        assert_eq!(pair[0].score, pair[1].score);
        assert_eq!(pair[0].branch_scores, pair[1].branch_scores);
    }

    #[test]
    fn empty_corpus_scores_to_empty_list() {
        let params = ModelParams::<f32>::seeded(small_model(), 11).unwrap();
        assert!(score_corpus(&[], &params).unwrap().is_empty());
    }

    #[test]
    fn failing_record_is_named() {
        let params = ModelParams::<f32>::seeded(small_model(), 11).unwrap();
        let mut corpus = small_corpus(3);
        corpus[1].text_embedding = vec![0.0; 5];
        let err = score_corpus(&corpus, &params).unwrap_err();
        match err {
            ScoreError::Record { id, .. } => assert_eq!(id, corpus[1].id),
            other => panic!("expected record error, got {other}"),
        }
    }

    #[test]
    fn disabled_branches_are_omitted() {
        let mut config = small_model();
        config.branches = BranchMask {
            video_text: true,
            frame_coherence: false,
            frame_quality: true,
            text_quality: false,
        };
        let params = ModelParams::<f32>::seeded(config, 5).unwrap();
        let scored = score_record(&small_corpus(1)[0], &params).unwrap();
        assert!(scored.branch_scores.video_text_match.is_some());
        assert!(scored.branch_scores.video_text_match_global.is_some());
        assert!(scored.branch_scores.frame_coherence.is_none());
        assert!(scored.branch_scores.frame_quality.is_some());
        assert!(scored.branch_scores.text_quality.is_none());
        assert_eq!(scored.branch_weights.len(), 2);
    }

    #[test]
    fn jsonl_roundtrip_keeps_schema() {
        let params = ModelParams::<f32>::seeded(small_model(), 11).unwrap();
        let scored = score_record(&small_corpus(1)[0], &params).unwrap();
        let line = serde_json::to_string(&scored).unwrap();
        for key in ["\"id\"", "\"score\"", "\"branch_scores\"", "\"branch_weights\""] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
        assert!(line.contains("\"video_text_match_global\""));
        let back: ScoredVideo = serde_json::from_str(&line).unwrap();
        assert_eq!(back, scored);
    }

    #[test]
    fn branch_report_covers_all_branches() {
        let params = ModelParams::<f32>::seeded(small_model(), 11).unwrap();
        let corpus = small_corpus(40);
        let report = branch_report(&corpus, &params).unwrap();
        for name in BRANCH_NAMES {
            assert!(report.branch_pnr.contains_key(name));
        }
        assert!(report.dcg.contains_key(&2) && report.dcg.contains_key(&4));
        assert!(report.auc >= 0.0 && report.auc <= 1.0);
        for per_branch in report.branch_mean_logits.values() {
            assert_eq!(per_branch.len(), 4);
        }
    }

    #[test]
    fn branch_report_rejects_ablated_or_ungraded() {
        let mut config = small_model();
        config.branches.frame_coherence = false;
        let ablated = ModelParams::<f32>::seeded(config, 5).unwrap();
        let corpus = small_corpus(4);
        assert!(matches!(
            branch_report(&corpus, &ablated).unwrap_err(),
            ScoreError::Corpus(_)
        ));

        let full = ModelParams::<f32>::seeded(small_model(), 5).unwrap();
        let mut ungraded = corpus;
        ungraded[0].grade = None;
        assert!(matches!(
            branch_report(&ungraded, &full).unwrap_err(),
            ScoreError::Corpus(_)
        ));
    }
}
