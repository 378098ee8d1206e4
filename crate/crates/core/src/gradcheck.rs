//! Central finite-difference gradient checker.
//!
//! Only evaluates the forward function, so it is independent of every
//! backward rule it is used to verify.

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor, relative to `max(1, |loss|)`. Central differences carry
/// rounding noise of order `eps·|loss|/h ≈ 2e-10·|loss|`, so gradient entries
/// far below the loss scale (e.g. ones that vanish analytically) are compared
/// against this floor instead of their own magnitude.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest [`rel_error`] over the probed entries.
    pub max_rel_error: f64,
    /// `(param index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR · max(1, |loss|))`
pub fn rel_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_ERROR_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check every element of every parameter.
pub fn check_gradients<T, F>(params: &[Tensor<T>], f: F) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    check_gradients_sampled(params, f, None, &mut Rng::new(0))
}

/// Like [`check_gradients`] but probes at most `per_param` randomly chosen
/// elements of each parameter (every parameter is still visited).
///
/// `f` must be deterministic: stochastic layers have to re-seed their
/// generator inside `f`.
pub fn check_gradients_sampled<T, F>(
    params: &[Tensor<T>],
    f: F,
    per_param: Option<usize>,
    rng: &mut Rng,
) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let fresh: Vec<Tensor<T>> = params.iter().map(|p| p.detach().into_param()).collect();
    let loss = f(&fresh)?;
    loss.backward()?;
    let loss = loss.item().to_f64().unwrap();
    let analytic: Vec<Vec<T>> = fresh
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();

    let h = T::lit(FD_STEP);
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let entries: Vec<usize> = match per_param {
            Some(k) if k < p.numel() => (0..k).map(|_| rng.below(p.numel())).collect(),
            _ => (0..p.numel()).collect(),
        };
        for ei in entries {
            let eval = |delta: T| -> Result<f64> {
                let mut vals = p.to_vec();
                vals[ei] += delta;
                let mut ps: Vec<Tensor<T>> = params.iter().map(|q| q.detach()).collect();
                ps[pi] = Tensor::from_vec(p.shape(), vals)?;
                Ok(f(&ps)?.item().to_f64().unwrap())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * FD_STEP);
            let a = analytic[pi][ei].to_f64().unwrap();
            let err = rel_error(a, numeric, loss);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (pi, ei);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
