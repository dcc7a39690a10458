//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod extended;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var, ATTENTION_MASK_FILL, LAYER_NORM_EPS};
pub use extended::Extended;
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("target {target} at row {index} outside [0, {classes})")]
    TargetOutOfRange {
        index: usize,
        target: i64,
        classes: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Default step for [`finite_diff_grad`].
pub const FD_EPS: f64 = 1e-5;

/// Step for [`finite_diff_grad`] in [`Extended`] precision.
pub const EXTENDED_FD_EPS: f64 = 1e-9;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
///
/// Generic over the element type so the same stencil can run in `f64` or in
/// [`Extended`] precision, where a much smaller `eps` is usable.
pub fn finite_diff_grad<T, F>(mut f: F, params: &[Tensor<T>], eps: T) -> Result<Vec<Tensor<T>>, ComputeError>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<T, ComputeError>,
{
    let two = T::one() + T::one();
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            let g = (plus - minus) / (two * eps);
            if !g.is_finite() {
                return Err(ComputeError::NonFinite { op: "finite_diff_grad" });
            }
            grad.data_mut()[i] = g;
        }
        out.push(grad);
    }
    Ok(out)
}

/// Elementwise relative error `|a - b| / max(|a|, |b|, 1e-8)`, maximized.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
