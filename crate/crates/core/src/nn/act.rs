//! Elementwise activations.

use ndarray::{Array, Dimension};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU via the tanh approximation. Forward and backward use the same
/// closed form, so gradient checks are exact to fp precision regardless
/// of how close the approximation is to the erf definition.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(gelu_scalar)
}

/// Input gradient of GELU: `gx = gy * gelu'(x)` where `x` is the forward
/// input (not the output).
pub fn gelu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = x.mapv(gelu_grad_scalar);
    gx.zip_mut_with(gy, |d, g| *d *= g);
    gx
}

/// Numerically stable logistic sigmoid. Saturates to exactly 0.0 / 1.0
/// for very large |x|; callers that need an open interval must clamp.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_grad(s: f64) -> f64 {
    s * (1.0 - s)
}
