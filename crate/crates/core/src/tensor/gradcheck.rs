//! Central finite-difference gradient oracle.
//!
//! Lives apart from the op implementations on purpose: it only ever calls the
//! forward path, so it stays an independent check of every backward rule.

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Numeric gradient of a scalar-valued function via central differences.
pub fn central_diff(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + step;
        let hi = f(&work)?;
        work[i] = orig - step;
        let lo = f(&work)?;
        work[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

/// Compare the analytic gradient of `build` (a scalar-producing graph over a
/// single leaf) against central differences. Returns the max relative error,
/// where the denominator is clamped at 1 so tiny gradients compare absolutely.
pub fn max_rel_error(
    build: impl Fn(&Tensor) -> Result<Tensor>,
    x0: &[f64],
    shape: &[usize],
    step: f64,
) -> Result<f64> {
    let leaf = Tensor::param(x0.to_vec(), shape)?;
    let loss = build(&leaf)?;
    loss.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; x0.len()]);
    let numeric = central_diff(
        |x| {
            let leaf = Tensor::from_vec(x.to_vec(), shape)?;
            build(&leaf)?.item()
        },
        x0,
        step,
    )?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1.0);
        worst = worst.max((a - n).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let err = max_rel_error(
            |x| Ok(x.mul(x)?.sum_all()),
            &[1.5, -2.0, 0.25],
            &[3],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }
}
