//! Temporal encoding: frame and cover embeddings enter a two-layer
//! transformer behind a learned projection, with a classification token
//! whose output row serves as the whole-video representation.

use super::{LayerNodes, ModelConfig, ModelError, ParamNodes};
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

/// Outputs of the encoder for one video.
#[derive(Debug, Clone)]
pub struct VideoRepr {
    /// `[1, d]` classification-token output: the video-level vector.
    pub video: NodeId,
    /// `[m, d]` per-frame outputs. Cover rows are consumed by the encoder
    /// but not exposed.
    pub frames: NodeId,
    /// Attention distributions, one `[L, L]` node per (layer, head).
    pub attention: Vec<NodeId>,
}

/// Projects the text embedding `[1, d_t]` into the model space `[1, d]`.
pub fn project_text<F: Scalar>(
    tape: &mut Tape<F>,
    nodes: &ParamNodes,
    config: &ModelConfig,
    text: &Tensor<F>,
) -> Result<NodeId, ModelError> {
    if text.shape() != [1, config.d_t] {
        return Err(ModelError::Input(format!(
            "text embedding shape {:?}, expected [1, {}]",
            text.shape(),
            config.d_t
        )));
    }
    let t = tape.leaf(text.clone());
    let proj = tape.matmul(t, nodes.text_proj_w)?;
    Ok(tape.add(proj, nodes.text_proj_b)?)
}

/// Encodes `frames` (`[m, d_f]`, `1 <= m <= capacity`) and `covers`
/// (`[2, d_f]`). Frames occupy position slots `1..=m`; covers always use the
/// two dedicated trailing slots so their role stays fixed regardless of `m`.
pub fn encode_video<F: Scalar>(
    tape: &mut Tape<F>,
    nodes: &ParamNodes,
    config: &ModelConfig,
    frames: &Tensor<F>,
    covers: &Tensor<F>,
    dropout_p: f64,
) -> Result<VideoRepr, ModelError> {
    let m = frames.shape().first().copied().unwrap_or(0);
    if frames.shape().len() != 2 || frames.shape()[1] != config.d_f || m == 0 {
        return Err(ModelError::Input(format!(
            "frame embeddings shape {:?}, expected [m, {}] with m >= 1",
            frames.shape(),
            config.d_f
        )));
    }
    if m > config.frame_capacity() {
        return Err(ModelError::Input(format!(
            "{m} frames exceed capacity {}",
            config.frame_capacity()
        )));
    }
    if covers.shape() != [2, config.d_f] {
        return Err(ModelError::Input(format!(
            "cover embeddings shape {:?}, expected [2, {}]",
            covers.shape(),
            config.d_f
        )));
    }

    let frames = tape.leaf(frames.clone());
    let covers = tape.leaf(covers.clone());

    // One projection serves frames and covers alike.
    let stacked = tape.concat(&[frames, covers], 0)?;
    let projected = tape.matmul(stacked, nodes.frame_proj_w)?;
    let projected = tape.add(projected, nodes.frame_proj_b)?;
    let frame_rows = tape.slice(projected, 0, 0, m)?;
    let cover_rows = tape.slice(projected, 0, m, m + 2)?;

    let cls_pos = tape.slice(nodes.pos, 0, 0, 1)?;
    let frame_pos = tape.slice(nodes.pos, 0, 1, m + 1)?;
    let cover_pos = tape.slice(nodes.pos, 0, config.max_len - 1, config.max_len + 1)?;

    let cls = tape.add(nodes.cls, cls_pos)?;
    let frame_rows = tape.add(frame_rows, frame_pos)?;
    let cover_rows = tape.add(cover_rows, cover_pos)?;

    let mut seq = tape.concat(&[cls, frame_rows, cover_rows], 0)?;
    let mut attention = Vec::new();
    for layer in &nodes.layers {
        seq = transformer_layer(tape, layer, config, seq, dropout_p, &mut attention)?;
    }

    let video = tape.slice(seq, 0, 0, 1)?;
    let frames = tape.slice(seq, 0, 1, m + 1)?;
    Ok(VideoRepr {
        video,
        frames,
        attention,
    })
}

/// One post-norm transformer block:
/// `x = LN1(seq + dropout(attn(seq)))`, `out = LN2(x + dropout(ff(x)))`.
fn transformer_layer<F: Scalar>(
    tape: &mut Tape<F>,
    layer: &LayerNodes,
    config: &ModelConfig,
    seq: NodeId,
    dropout_p: f64,
    attention: &mut Vec<NodeId>,
) -> Result<NodeId, TensorError> {
    let attn = multi_head_attention(tape, layer, config, seq, attention)?;
    let attn = tape.dropout(attn, dropout_p)?;
    let x = tape.add(seq, attn)?;
    let x = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)?;

    let ff = tape.matmul(x, layer.ff1_w)?;
    let ff = tape.add(ff, layer.ff1_b)?;
    let ff = tape.relu(ff)?;
    let ff = tape.matmul(ff, layer.ff2_w)?;
    let ff = tape.add(ff, layer.ff2_b)?;
    let ff = tape.dropout(ff, dropout_p)?;
    let out = tape.add(x, ff)?;
    tape.layer_norm(out, layer.ln2_gamma, layer.ln2_beta)
}

/// Scaled dot-product attention with heads taken as column slices of the
/// shared `[d, d]` projections.
fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    layer: &LayerNodes,
    config: &ModelConfig,
    seq: NodeId,
    attention: &mut Vec<NodeId>,
) -> Result<NodeId, TensorError> {
    let dh = config.d / config.n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let q = tape.matmul(seq, layer.wq)?;
    let q = tape.add(q, layer.bq)?;
    let k = tape.matmul(seq, layer.wk)?;
    let k = tape.add(k, layer.bk)?;
    let v = tape.matmul(seq, layer.wv)?;
    let v = tape.add(v, layer.bv)?;

    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale)?;
        let probs = tape.softmax_last(scores)?;
        attention.push(probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat(&heads, 1)?;
    let out = tape.matmul(ctx, layer.wo)?;
    tape.add(out, layer.bo)
}
