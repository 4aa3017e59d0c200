//! GELU activation (tanh approximation) and its derivative.

use crate::numerics::matrix::Matrix;

/// sqrt(2 / pi)
pub const GELU_TANH_SCALE: f64 = 0.7978845608028654;
/// Cubic coefficient of the tanh approximation.
pub const GELU_TANH_CUBIC: f64 = 0.044715;

/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`
#[inline]
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_TANH_SCALE * (x + GELU_TANH_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_TANH_SCALE * (x + GELU_TANH_CUBIC * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_TANH_SCALE * (1.0 + 3.0 * GELU_TANH_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

pub fn gelu_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| gelu(x)).collect()
}

pub fn gelu_matrix(m: &Matrix) -> Matrix {
    m.map(gelu)
}
