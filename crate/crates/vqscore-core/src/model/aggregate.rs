//! Squeeze-excitation aggregation of the branch logits into one calibrated
//! score, and the full per-record forward pass.

use super::{
    encode_video, fcab_score, fqab_score, project_text, tqab_score, vtmab_score, ModelConfig,
    ModelError, ParamNodes, VtmabScores,
};
use crate::corpus::VideoRecord;
use crate::tensor::{NodeId, Scalar, Tape};

/// Aggregation outputs.
#[derive(Debug, Clone, Copy)]
pub struct SeOut {
    /// `[1, k]` softmax branch weights.
    pub weights: NodeId,
    /// `[1]` final score, strictly inside (0, 1).
    pub score: NodeId,
}

/// Weighs the `k` branch logits by a gate computed from the video and text
/// vectors: stack them `[2, d]`, squeeze through `w_s` `[d, 1]`, ReLU,
/// excite through `w_e` `[2, k]`, softmax into weights, then squash the
/// weighted sum of logits with a sigmoid.
pub fn se_aggregate<F: Scalar>(
    tape: &mut Tape<F>,
    video: NodeId,
    text: NodeId,
    scores: &[NodeId],
    w_s: NodeId,
    w_e: NodeId,
) -> Result<SeOut, ModelError> {
    let k = tape.value(w_e).shape()[1];
    if scores.is_empty() || scores.len() != k {
        return Err(ModelError::Input(format!(
            "{} branch scores against an excitation head of width {k}",
            scores.len()
        )));
    }

    let stack = tape.concat(&[video, text], 0)?;
    let squeezed = tape.matmul(stack, w_s)?;
    let squeezed = tape.relu(squeezed)?;
    let squeezed = tape.reshape(squeezed, vec![1, 2])?;
    let excited = tape.matmul(squeezed, w_e)?;
    let weights = tape.softmax_last(excited)?;

    let logits = tape.concat(scores, 0)?;
    let logits = tape.reshape(logits, vec![1, k])?;
    let wt = tape.transpose(weights)?;
    let mix = tape.matmul(logits, wt)?;
    let mix = tape.reshape(mix, vec![1])?;
    let score = tape.sigmoid(mix)?;
    Ok(SeOut { weights, score })
}

/// Every interesting node from one record's forward pass. Branch logits
/// disabled by the config's mask are `None` and excluded from aggregation.
#[derive(Debug, Clone)]
pub struct RecordForward {
    pub matching: Option<VtmabScores>,
    pub coherence: Option<NodeId>,
    pub frame_quality: Option<NodeId>,
    pub text_quality: Option<NodeId>,
    /// `[1, k]` aggregation weights over the enabled branches.
    pub weights: NodeId,
    /// `[1]` final score in (0, 1).
    pub score: NodeId,
    /// Attention distributions from the encoder, for diagnostics.
    pub attention: Vec<NodeId>,
}

/// Runs one record through encoder, branches, and aggregation.
pub fn forward_record<F: Scalar>(
    tape: &mut Tape<F>,
    nodes: &ParamNodes,
    config: &ModelConfig,
    record: &VideoRecord,
    dropout_p: f64,
) -> Result<RecordForward, ModelError> {
    let (d_t, d_f) = record.dims();
    if d_t != config.d_t || d_f != config.d_f {
        return Err(ModelError::Input(format!(
            "record '{}' has dims ({d_t}, {d_f}), model expects ({}, {})",
            record.id, config.d_t, config.d_f
        )));
    }

    let frames = record.frames_tensor::<F>();
    let covers = record.covers_tensor::<F>();
    let text = record.text_tensor::<F>();

    let repr = encode_video(tape, nodes, config, &frames, &covers, dropout_p)?;
    let text = project_text(tape, nodes, config, &text)?;

    let mask = config.branches;
    let mut enabled = Vec::with_capacity(4);
    let matching = if mask.video_text {
        let s = vtmab_score(tape, repr.video, repr.frames, text, config.normalize_dots)?;
        enabled.push(s.combined);
        Some(s)
    } else {
        None
    };
    let coherence = if mask.frame_coherence {
        let s = fcab_score(tape, repr.video, repr.frames, nodes.w_c)?;
        enabled.push(s);
        Some(s)
    } else {
        None
    };
    let frame_quality = if mask.frame_quality {
        let s = fqab_score(tape, repr.video, &nodes.mlp_f)?;
        enabled.push(s);
        Some(s)
    } else {
        None
    };
    let text_quality = if mask.text_quality {
        let s = tqab_score(tape, text, &nodes.mlp_t)?;
        enabled.push(s);
        Some(s)
    } else {
        None
    };

    let agg = se_aggregate(tape, repr.video, text, &enabled, nodes.w_s, nodes.w_e)?;
    Ok(RecordForward {
        matching,
        coherence,
        frame_quality,
        text_quality,
        weights: agg.weights,
        score: agg.score,
        attention: repr.attention,
    })
}
