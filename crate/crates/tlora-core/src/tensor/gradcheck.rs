//! Central finite-difference gradient checking.
//!
//! The checker is a pure forward-evaluation oracle: it never touches the
//! tape's backward rules, so it stays independent of the code it verifies.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default perturbation step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative-error floor; keeps zero-gradient coordinates from dividing 0/0.
pub const FD_DENOM_FLOOR: f64 = 1e-8;

/// Compare `analytic` against central finite differences of `f` around
/// `param`, one coordinate at a time, and return the worst relative error
/// `|num - ana| / max(|num|, |ana|, 1e-8)`.
///
/// `f` is called with a perturbed copy of `param`; it must evaluate the same
/// scalar function on every call (re-seed any randomness internally).
pub fn finite_diff_check<F>(mut f: F, param: &Tensor, analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != param.numel() {
        return Err(Error::dim(
            "finite_diff_check",
            &param.shape,
            &[analytic.len()],
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = param.clone();
    for i in 0..param.numel() {
        let orig = param.data[i];
        probe.data[i] = orig + step;
        let fp = f(&probe)?;
        probe.data[i] = orig - step;
        let fm = f(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = numeric.abs().max(analytic[i].abs()).max(FD_DENOM_FLOOR);
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(worst)
}
