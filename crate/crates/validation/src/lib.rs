//! Reference computations written independently of `selftrain`, used by the
//! acceptance suite to cross-check it.

use nalgebra::{DMatrix, DVector};

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Grid minimizer of `u²/(2cΔ) + softplus(h + u) - p (h + u)` over `[-20, 20]`:
/// a 1e-3 scan, then a 1e-6 scan around its best point.
pub fn grid_minimizer(chi: f64, delta: f64, p: f64, h: f64) -> f64 {
    let obj = |u: f64| u * u / (2.0 * chi * delta) + softplus(h + u) - p * (h + u);
    let mut best = (f64::INFINITY, 0.0);
    for k in -20_000..=20_000 {
        let u = k as f64 * 1e-3;
        let v = obj(u);
        if v < best.0 {
            best = (v, u);
        }
    }
    let centre = best.1;
    for k in -2000..=2000 {
        let u = centre + k as f64 * 1e-6;
        let v = obj(u);
        if v < best.0 {
            best = (v, u);
        }
    }
    best.1
}

/// Minimizer `(w, b)` of `½ Σ (y - x·w/√N - b)² + ½ λ |w|²` by an LU solve of the
/// normal equations. The bias is not penalized. Returns `w` followed by `b`.
pub fn ridge_normal_equations(rows: &[&[f64]], targets: &[f64], lambda: f64) -> Vec<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    let scale = 1.0 / (n as f64).sqrt();
    let a = DMatrix::from_fn(rows.len(), n + 1, |r, c| if c == n { 1.0 } else { rows[r][c] * scale });
    let mut lhs = a.transpose() * &a;
    for j in 0..n {
        lhs[(j, j)] += lambda;
    }
    let rhs = a.transpose() * DVector::from_column_slice(targets);
    lhs.lu().solve(&rhs).expect("regular normal equations").iter().copied().collect()
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
