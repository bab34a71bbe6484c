//! Central finite-difference gradient checker.
//!
//! This is the validation oracle for every differentiable operation and
//! loss in the crate: it compares the tape's analytic gradient against
//! `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate and reports the worst
//! relative error.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Evaluate a scalar-valued function once, without gradients.
fn eval_value<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::InvalidArgument(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    Ok(g.value(y).item())
}

/// Maximum relative error between analytic and central-difference
/// gradients of `f` at `point`, using the given step size.
///
/// The error per coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("grad_check step must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::InvalidArgument(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    g.backward(y)?;
    let analytic = match g.grad(x) {
        Some(t) => t.clone(),
        None => Tensor::zeros(point.shape()),
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_value(&f, &probe).map_err(|e| {
            Error::InvalidArgument(format!("non-finite evaluation near point at coordinate {i}: {e}"))
        })?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_value(&f, &probe).map_err(|e| {
            Error::InvalidArgument(format!("non-finite evaluation near point at coordinate {i}: {e}"))
        })?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let an = analytic.data()[i];
        let err = (an - numeric).abs() / (an.abs() + numeric.abs() + 1e-12);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
