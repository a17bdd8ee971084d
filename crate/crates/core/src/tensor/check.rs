use std::fmt;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Why a finite-difference probe could not be completed.
#[derive(Debug)]
pub enum GradCheckFailure {
    /// Step size outside `[1e-7, 1e-3]`.
    BadStep(f64),
    /// The function errored while building its graph.
    Build(crate::error::Error),
    /// The function did not return a scalar.
    NotScalar(Vec<usize>),
    /// A probe or the analytic gradient produced NaN/inf at `coordinate`.
    NonFinite { coordinate: usize },
}

impl fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCheckFailure::BadStep(eps) => write!(f, "step {eps} outside [1e-7, 1e-3]"),
            GradCheckFailure::Build(e) => write!(f, "function failed: {e}"),
            GradCheckFailure::NotScalar(s) => write!(f, "function returned shape {s:?}, expected a scalar"),
            GradCheckFailure::NonFinite { coordinate } => write!(f, "non-finite value probing coordinate {coordinate}"),
        }
    }
}

impl std::error::Error for GradCheckFailure {}

/// Compares backward-mode gradients of `f` at `x` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> std::result::Result<f64, GradCheckFailure>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradCheckFailure::BadStep(eps));
    }
    let eval = |data: Vec<f64>| -> std::result::Result<f64, GradCheckFailure> {
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(x.shape(), data).map_err(GradCheckFailure::Build)?);
        let out = f(&mut g, input).map_err(GradCheckFailure::Build)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let input = g.leaf(x.clone().with_grad());
    let out = f(&mut g, input).map_err(GradCheckFailure::Build)?;
    if g.value(out).numel() != 1 {
        return Err(GradCheckFailure::NotScalar(g.value(out).shape().to_vec()));
    }
    g.backward(out).map_err(GradCheckFailure::Build)?;
    let analytic = g.grad(input).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    if let Some(i) = analytic.iter().position(|a| !a.is_finite()) {
        return Err(GradCheckFailure::NonFinite { coordinate: i });
    }
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() || !a.is_finite() {
            return Err(GradCheckFailure::NonFinite { coordinate: i });
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
