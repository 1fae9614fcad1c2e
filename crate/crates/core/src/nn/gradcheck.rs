//! Finite-difference gradient checking.
//!
//! Central differences at a configurable step, compared against analytic
//! gradients with a relative tolerance. Used by unit tests here and by the
//! acceptance suite, so it is part of the public API.

/// Central finite differences of `f` with respect to every entry of `x`.
/// `x` is perturbed in place and restored bit-exactly afterwards.
pub fn central_diff(x: &mut [f64], step: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(x);
        x[i] = orig - step;
        let fm = f(x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    out
}

/// Compare analytic vs numeric gradients. An entry passes when
/// `|a − n| ≤ tol·max(|a|, |n|)` or both magnitudes sit below `floor`
/// (central differences cannot resolve gradients near zero). Returns the
/// first offending index with both values on failure.
pub fn compare_grads(
    analytic: &[f64],
    numeric: &[f64],
    tol: f64,
    floor: f64,
) -> std::result::Result<(), String> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() < floor && n.abs() < floor {
            continue;
        }
        let denom = a.abs().max(n.abs());
        if (a - n).abs() > tol * denom {
            return Err(format!(
                "gradient mismatch at index {i}: analytic {a} vs numeric {n} (rel {})",
                (a - n).abs() / denom
            ));
        }
    }
    Ok(())
}

/// Step and tolerance used throughout the gradient acceptance suite.
pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
/// Magnitude below which both gradients are considered numerically zero.
pub const FD_FLOOR: f64 = 1e-6;
