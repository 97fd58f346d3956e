//! The four assessment branches. Each maps tape nodes for the video vector,
//! frame matrix, and text vector to an unbounded scalar logit:
//!
//! * `vtmab_score`: video-text matching, global and per-frame dot products.
//! * `fcab_score`: frame coherence from signed difference rows.
//! * `fqab_score` / `tqab_score`: frame and text quality via small MLPs.

use super::{MlpNodes, ModelError};
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

/// Floor for the optional normalization scales so zero vectors stay finite.
const NORM_FLOOR: f64 = 1e-12;

/// Video-text matching outputs, all `[1]` scalar nodes.
#[derive(Debug, Clone, Copy)]
pub struct VtmabScores {
    /// Whole-video · text dot product.
    pub global: NodeId,
    /// Mean of the per-frame · text dot products.
    pub local: NodeId,
    /// Mean of the global and local terms: the branch logit.
    pub combined: NodeId,
}

/// Matching scores between the encoded video (`video` `[1, d]`, `frames`
/// `[m, d]`) and the projected text (`[1, d]`). With `normalize`, each dot
/// product becomes a cosine; the normalization scales are computed from
/// forward values and held constant in the backward pass.
pub fn vtmab_score<F: Scalar>(
    tape: &mut Tape<F>,
    video: NodeId,
    frames: NodeId,
    text: NodeId,
    normalize: bool,
) -> Result<VtmabScores, ModelError> {
    let m = tape.value(frames).shape()[0];
    if m == 0 {
        return Err(ModelError::Input("matching needs at least one frame".into()));
    }

    let tt = tape.transpose(text)?;
    let global = tape.matmul(video, tt)?;
    let mut global = tape.reshape(global, vec![1])?;
    let mut dots = tape.matmul(frames, tt)?;

    if normalize {
        let tn = tape.value(text).norm();
        let vn = tape.value(video).norm();
        global = tape.mul_scalar(global, inv_scale::<F>(vn * tn))?;
        let fv = tape.value(frames);
        let d = fv.shape()[1];
        let scales: Vec<F> = (0..m)
            .map(|j| {
                let row = &fv.data()[j * d..(j + 1) * d];
                let n = row.iter().map(|&e| e.as_f64() * e.as_f64()).sum::<f64>().sqrt();
                inv_scale::<F>(n * tn)
            })
            .collect();
        let scales = tape.leaf(Tensor::from_parts(vec![m, 1], scales));
        dots = tape.mul(dots, scales)?;
    }

    let local = tape.mean_all(dots)?;
    let sum = tape.add(global, local)?;
    let combined = tape.mul_scalar(sum, F::from_f64(0.5))?;
    Ok(VtmabScores {
        global,
        local,
        combined,
    })
}

fn inv_scale<F: Scalar>(denom: f64) -> F {
    F::from_f64(1.0 / denom.max(NORM_FLOOR))
}

/// Coherence logit from signed difference rows: `m` global rows
/// `video - frame_j` stacked over `m - 1` local rows `frame_{j+1} - frame_j`,
/// averaged into a d-vector and projected by `w_c` (`[d, 1]`). A single-frame
/// video contributes its global row only.
pub fn fcab_score<F: Scalar>(
    tape: &mut Tape<F>,
    video: NodeId,
    frames: NodeId,
    w_c: NodeId,
) -> Result<NodeId, ModelError> {
    let shape = tape.value(frames).shape().to_vec();
    let (m, d) = (shape[0], shape[1]);
    if m == 0 {
        return Err(ModelError::Input("coherence needs at least one frame".into()));
    }

    let v_row = tape.reshape(video, vec![d])?;
    let center = tape.sub(frames, v_row)?;
    let global_rows = tape.mul_scalar(center, F::from_f64(-1.0))?;
    let stacked = if m > 1 {
        let next = tape.slice(frames, 0, 1, m)?;
        let prev = tape.slice(frames, 0, 0, m - 1)?;
        let local_rows = tape.sub(next, prev)?;
        tape.concat(&[global_rows, local_rows], 0)?
    } else {
        global_rows
    };
    let mean = tape.mean_axis(stacked, 0)?;
    let mean = tape.reshape(mean, vec![1, d])?;
    let s = tape.matmul(mean, w_c)?;
    Ok(tape.reshape(s, vec![1])?)
}

/// Frame quality logit: a two-layer MLP (ReLU hidden, linear scalar output)
/// on the video vector.
pub fn fqab_score<F: Scalar>(
    tape: &mut Tape<F>,
    video: NodeId,
    mlp: &MlpNodes,
) -> Result<NodeId, ModelError> {
    mlp_scalar(tape, video, mlp).map_err(ModelError::from)
}

/// Text quality logit: the same MLP shape applied to the text vector.
pub fn tqab_score<F: Scalar>(
    tape: &mut Tape<F>,
    text: NodeId,
    mlp: &MlpNodes,
) -> Result<NodeId, ModelError> {
    mlp_scalar(tape, text, mlp).map_err(ModelError::from)
}

fn mlp_scalar<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    mlp: &MlpNodes,
) -> Result<NodeId, TensorError> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add(h, mlp.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add(o, mlp.b2)?;
    tape.reshape(o, vec![1])
}
