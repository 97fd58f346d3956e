//! Bias-corrected Adam over the canonical parameter list. Update arithmetic
//! runs in f64 regardless of the parameter element type.

use thiserror::Error;

use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("gradient for '{0}' is non-finite; step aborted")]
    NonFiniteGradient(String),
    #[error("gradient list has {got} tensors, parameters have {want}")]
    Misaligned { want: usize, got: usize },
    #[error("gradient for '{name}' has shape {got:?}, parameter is {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

/// First/second moment buffers, aligned with [`ModelParams::visit`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let mut m = Vec::with_capacity(params.tensor_count());
        params.visit(|_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One optimizer step. Validates every gradient before mutating anything, so
/// a non-finite gradient leaves parameters and state untouched.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), AdamError> {
    let mut names = Vec::with_capacity(grads.len());
    let mut shapes = Vec::with_capacity(grads.len());
    params.visit(|n, t| {
        names.push(n);
        shapes.push(t.shape().to_vec());
    });
    if grads.len() != names.len() {
        return Err(AdamError::Misaligned {
            want: names.len(),
            got: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != shapes[i] {
            return Err(AdamError::ShapeMismatch {
                name: names[i].clone(),
                want: shapes[i].clone(),
                got: g.shape().to_vec(),
            });
        }
        if g.data().iter().any(|e| !e.is_finite()) {
            return Err(AdamError::NonFiniteGradient(names[i].clone()));
        }
    }

    state.step += 1;
    let t = state.step;
    let mut i = 0;
    params.visit_mut(|_, p| {
        update_slice(
            p.data_mut(),
            grads[i].data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            t,
            lr,
        );
        i += 1;
    });
    Ok(())
}

/// Elementwise bias-corrected update at step `t` (1-based).
fn update_slice<F: Scalar>(p: &mut [F], g: &[F], m: &mut [F], v: &mut [F], t: u64, lr: f64) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for k in 0..p.len() {
        let gk = g[k].as_f64();
        let mk = BETA1 * m[k].as_f64() + (1.0 - BETA1) * gk;
        let vk = BETA2 * v[k].as_f64() + (1.0 - BETA2) * gk * gk;
        m[k] = F::from_f64(mk);
        v[k] = F::from_f64(vk);
        let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + EPSILON);
        p[k] = F::from_f64(p[k].as_f64() - update);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_params() -> ModelParams<f32> {
        let mut config = ModelConfig::new(6, 6);
        config.d = 4;
        config.n_heads = 2;
        ModelParams::seeded(config, 50).unwrap()
    }

    fn grads_like(params: &ModelParams<f32>, fill: f32) -> Vec<Tensor<f32>> {
        let mut out = Vec::new();
        params.visit(|_, t| {
            out.push(Tensor::from_parts(
                t.shape().to_vec(),
                vec![fill; t.numel()],
            ))
        });
        out
    }

    #[test]
    fn zero_gradient_on_fresh_state_leaves_params_unchanged() {
        let mut params = small_params();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = grads_like(&params, 0.0);
        adam_step(&mut params, &grads, &mut state, 0.001).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_matches_bias_corrected_hand_value() {
        // scalar view: g=1, fresh state, t=1 -> update = lr / (1 + eps)
        let mut p = [0.5f64];
        let mut m = [0.0];
        let mut v = [0.0];
        update_slice(&mut p, &[1.0], &mut m, &mut v, 1, 0.001);
        let want = 0.5 - 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn second_identical_step_is_no_larger() {
        let mut p = [0.0f64];
        let mut m = [0.0];
        let mut v = [0.0];
        update_slice(&mut p, &[1.0], &mut m, &mut v, 1, 0.001);
        let u1 = -p[0];
        let before = p[0];
        update_slice(&mut p, &[1.0], &mut m, &mut v, 2, 0.001);
        let u2 = before - p[0];
        assert!(u2 <= u1 * (1.0 + 1e-6), "u1 {u1}, u2 {u2}");
        assert!(u2 > 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = small_params();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        // state pre-populated so an abort after partial work would show
        let grads = grads_like(&params, 0.5);
        adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        let params_snapshot = params.clone();
        let state_snapshot = state.clone();

        let mut bad = grads_like(&params, 0.5);
        let n = bad[7].numel();
        bad[7].data_mut()[n - 1] = f32::NAN;
        let err = adam_step(&mut params, &bad, &mut state, 0.01).unwrap_err();
        assert!(matches!(err, AdamError::NonFiniteGradient(_)));
        assert_eq!(params, params_snapshot);
        assert_eq!(state, state_snapshot);
        assert_ne!(params, before);
    }

    #[test]
    fn misaligned_gradients_are_rejected() {
        let mut params = small_params();
        let mut state = AdamState::new(&params);
        let mut grads = grads_like(&params, 0.0);
        grads.pop();
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, 0.01).unwrap_err(),
            AdamError::Misaligned { .. }
        ));

        let mut grads = grads_like(&params, 0.0);
        grads[0] = Tensor::zeros(vec![1, 1]);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, 0.01).unwrap_err(),
            AdamError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn zero_learning_rate_freezes_params_but_advances_state() {
        let mut params = small_params();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = grads_like(&params, 0.3);
        adam_step(&mut params, &grads, &mut state, 0.0).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
        assert!(state.m[0].data().iter().all(|&x| x != 0.0));
    }
}
