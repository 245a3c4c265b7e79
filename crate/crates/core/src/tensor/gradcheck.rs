//! Central finite-difference gradient oracle.
//!
//! Kept in the library (not test code) because the gradient-fidelity checks
//! are part of the artifact's contract: every analytic adjoint must agree
//! with this estimator.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorResult};

/// Default perturbation step.
pub const FD_EPS: f64 = 1e-5;

/// Central-difference gradient estimate of `f` at `x`, same shape as `x`.
pub fn finite_diff_grad<S, F>(mut f: F, x: &Tensor<S>, eps: f64) -> TensorResult<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> TensorResult<S>,
{
    let h = S::from_f64_lossy(eps);
    let two_h = h + h;
    let mut grad = Tensor::zeros(&x.shape);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe)?;
        probe.data[i] = orig - h;
        let down = f(&probe)?;
        probe.data[i] = orig;
        grad.data[i] = (up - down) / two_h;
    }
    Ok(grad)
}

/// Largest relative disagreement between two gradient buffers. The
/// denominator is floored so near-zero entries compare absolutely.
pub fn max_rel_err<S: Scalar>(analytic: &[S], numeric: &[S], floor: f64) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a.to_f64_lossy();
        let n = n.to_f64_lossy();
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
