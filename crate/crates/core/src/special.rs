//! Scalar special functions shared by the finite-size and asymptotic code paths.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Logistic function, evaluated on the branch that never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Gaussian upper-tail probability `H(x) = P(Z > x)` for standard normal `Z`.
#[inline]
pub fn gaussian_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Density of `N(mean, var)` at `x`.
#[inline]
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    std_normal_pdf((x - mean) / sd) / sd
}

/// Test error of the rule `sign(x·w/√N + B)` on fresh mixture data, given
/// `q = |w|^2/N`, `m = v·w/N` and the bias.
#[inline]
pub fn gen_error_from_moments(q: f64, m: f64, bias: f64, rho: f64, delta: f64) -> f64 {
    let sd = (delta * q).sqrt();
    rho * gaussian_tail((m + bias) / sd) + (1.0 - rho) * gaussian_tail((m - bias) / sd)
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
