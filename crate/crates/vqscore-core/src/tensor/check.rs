use super::tape::{NodeId, Tape};
use super::{Tensor, TensorError};

/// Compares analytic gradients against central finite differences at 64-bit
/// precision.
///
/// `build` reconstructs the same scalar-valued graph from the given leaves on
/// every call; `points` are the leaf values to differentiate at. Returns the
/// maximum over all coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn gradient_check<B>(
    build: B,
    points: &[Tensor<f64>],
    step: f64,
) -> Result<f64, TensorError>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::invalid(
            "gradient_check",
            format!("step {step} must be positive and finite"),
        ));
    }

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        let y = tape.item(root)?;
        if !y.is_finite() {
            return Err(TensorError::NonFinite {
                op: "gradient_check",
            });
        }
        Ok(y)
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let root = build(&mut tape, &ids)?;
    if !tape.item(root)?.is_finite() {
        return Err(TensorError::NonFinite {
            op: "gradient_check",
        });
    }
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut max_err = 0.0f64;
    for (leaf_idx, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .ok_or_else(|| TensorError::invalid("gradient_check", "missing leaf gradient"))?
            .data()
            .to_vec();
        for coord in 0..analytic.len() {
            let orig = work[leaf_idx].data()[coord];
            work[leaf_idx].data_mut()[coord] = orig + step;
            let plus = eval(&work)?;
            work[leaf_idx].data_mut()[coord] = orig - step;
            let minus = eval(&work)?;
            work[leaf_idx].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "gradient_check",
                });
            }
            let a = analytic[coord];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
