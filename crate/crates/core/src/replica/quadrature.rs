//! Gauss–Hermite rules and frozen Monte Carlo sample sets for expectations
//! over standard normal variables.

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::special::std_normal_pdf;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Gauss–Hermite where the integrand is smooth (no selection, soft labels), Monte Carlo elsewhere.
    Auto,
    GaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    pub backend: Backend,
    /// Nodes per axis of the tensor Gauss–Hermite grid.
    pub gh_nodes: usize,
    /// Monte Carlo sample count per step.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            backend: Backend::Auto,
            gh_nodes: 80,
            mc_samples: 200_000,
            seed: 0,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gh_nodes < 20 || self.gh_nodes > 400 {
            return Err(Error::config("quadrature.gh_nodes", "must lie in [20, 400]"));
        }
        if !(100_000..=10_000_000).contains(&self.mc_samples) {
            return Err(Error::config("quadrature.mc_samples", "must lie in [1e5, 1e7]"));
        }
        Ok(())
    }
}

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1D {
    /// `n`-point Gauss–Hermite rule for the standard normal weight.
    ///
    /// Nodes are eigenvalues of the Jacobi matrix of the probabilists' Hermite
    /// polynomials, isolated by Sturm-sequence bisection and polished with
    /// Newton. Weights use the Christoffel sum of the orthonormal polynomials,
    /// rescaled on the fly so the far tail underflows to zero instead of overflowing.
    pub fn gauss_hermite(n: usize) -> Rule1D {
        assert!(n >= 1);
        let bound = 2.0 * (n as f64).sqrt() + 2.0;
        let mut nodes = vec![0.0; n];
        for i in 0..n / 2 {
            let (mut lo, mut hi) = (-bound, 0.0);
            while hi - lo > 1e-15 * (1.0 + lo.abs()) {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                if sturm_count(n, mid) > i {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mut z = 0.5 * (lo + hi);
            for _ in 0..3 {
                let (pn, pn1, _) = orthonormal(n, z);
                let step = pn / ((n as f64).sqrt() * pn1);
                if step.is_finite() {
                    z -= step;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
        }
        let weights = nodes.iter().map(|&z| christoffel_weight(n, z)).collect();
        Rule1D { nodes, weights }
    }
}

/// Number of Jacobi-matrix eigenvalues below `x` (off-diagonals `sqrt(k)`).
fn sturm_count(n: usize, x: f64) -> usize {
    let mut count = 0;
    let mut d = -x;
    for k in 0..n {
        if k > 0 {
            d = -x - k as f64 / d;
        }
        if d == 0.0 {
            d = -1e-300;
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// `(φ_n(z), φ_{n-1}(z), scale)` for the normal-orthonormal Hermite polynomials,
/// up to a common positive factor `scale`.
fn orthonormal(n: usize, z: f64) -> (f64, f64, f64) {
    let (mut prev, mut cur) = (0.0f64, 1.0f64);
    let mut scale = 1.0;
    for k in 0..n {
        let next = (z * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e100 {
            cur *= 1e-100;
            prev *= 1e-100;
            scale *= 1e100;
        }
    }
    (cur, prev, scale)
}

fn christoffel_weight(n: usize, z: f64) -> f64 {
    // 1 / Σ_{k<n} φ_k(z)^2 with φ_0 = 1
    let (mut prev, mut cur) = (0.0f64, 1.0f64);
    let mut sum = 1.0;
    let mut log_scale = 0.0f64;
    for k in 0..n - 1 {
        let next = (z * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        sum += cur * cur;
        if cur.abs() > 1e100 {
            cur *= 1e-100;
            prev *= 1e-100;
            sum *= 1e-200;
            log_scale += 200.0 * std::f64::consts::LN_10;
        }
    }
    (-(sum.ln() + log_scale)).exp()
}

impl Rule1D {
    /// `n`-point Gauss–Legendre rule on `[-1, 1]` (unit weight).
    pub fn gauss_legendre(n: usize) -> Rule1D {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (mut p1, mut p2) = (1.0f64, 0.0f64);
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                dp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / dp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[n - 1 - i] = weights[i];
        }
        Rule1D { nodes, weights }
    }

    /// Composite Gauss–Legendre rule for `E[f(Z)]`, `Z ~ N(0, 1)`, when `f` has
    /// jumps or steep ramps at known places.
    ///
    /// The range `[-10, 10]` is cut into unit pieces, at every jump, and around
    /// every ramp `(centre, width)` at distances `width · 2^k`, so each piece sees
    /// a smooth integrand on its own scale.
    pub fn graded(ramps: &[(f64, f64)], jumps: &[f64], per_piece: usize) -> Rule1D {
        const LIM: f64 = 8.0;
        let mut cuts: Vec<f64> = (0..=8).map(|k| -LIM + 2.0 * k as f64).collect();
        cuts.extend(jumps.iter().copied().filter(|j| j.abs() < LIM));
        for &(c, w) in ramps {
            if c.abs() >= LIM + 1.0 || !(w > 0.0) {
                continue;
            }
            cuts.push(c);
            let mut d = w;
            while d < 2.0 {
                cuts.push(c - d);
                cuts.push(c + d);
                d *= 2.0;
            }
        }
        cuts.retain(|c| c.abs() <= LIM);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let base = Rule1D::gauss_legendre(per_piece);
        let mut nodes = Vec::with_capacity(cuts.len() * per_piece);
        let mut weights = Vec::with_capacity(cuts.len() * per_piece);
        for piece in cuts.windows(2) {
            let (mid, half) = (0.5 * (piece[0] + piece[1]), 0.5 * (piece[1] - piece[0]));
            for (x, w) in base.nodes.iter().zip(&base.weights) {
                let z = mid + half * x;
                nodes.push(z);
                weights.push(w * half * std_normal_pdf(z));
            }
        }
        Rule1D { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Points `(z1, z2)` of independent standard normals with weights.
///
/// For Monte Carlo sets all weights are `1/n` and `is_monte_carlo` is set so
/// that standard errors can be reported.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub w: Vec<f64>,
    pub is_monte_carlo: bool,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// One-dimensional rule; `z2` is zero.
    pub fn gauss_hermite_1d(n: usize) -> NodeSet {
        let r = Rule1D::gauss_hermite(n);
        NodeSet {
            z2: vec![0.0; r.nodes.len()],
            z1: r.nodes,
            w: r.weights,
            is_monte_carlo: false,
        }
    }

    /// Tensor-product rule on `n x n` nodes.
    pub fn gauss_hermite_2d(n: usize) -> NodeSet {
        let r = Rule1D::gauss_hermite(n);
        NodeSet::tensor(&r, &r)
    }

    /// Tensor product of `z1` and `z2` rules.
    pub fn tensor(r1: &Rule1D, r2: &Rule1D) -> NodeSet {
        let mut set = NodeSet {
            z1: Vec::with_capacity(r1.len() * r2.len()),
            z2: Vec::with_capacity(r1.len() * r2.len()),
            w: Vec::with_capacity(r1.len() * r2.len()),
            is_monte_carlo: false,
        };
        for (x, wx) in r1.nodes.iter().zip(&r1.weights) {
            for (y, wy) in r2.nodes.iter().zip(&r2.weights) {
                let w = wx * wy;
                // the far corners carry no weight at double precision
                if w < 1e-300 {
                    continue;
                }
                set.z1.push(*x);
                set.z2.push(*y);
                set.w.push(w);
            }
        }
        set
    }

    /// `n` frozen standard normal pairs drawn from the stream of step `t`.
    pub fn monte_carlo(n: usize, seed: u64, t: usize) -> NodeSet {
        const BLOCK: usize = 4096;
        let mut z1 = vec![0.0; n];
        let mut z2 = vec![0.0; n];
        z1.par_chunks_mut(BLOCK)
            .zip(z2.par_chunks_mut(BLOCK))
            .enumerate()
            .for_each(|(b, (a, c))| {
                let mut rng = stream(seed, Purpose::ReplicaMonteCarlo, t as u64, b as u64);
                for (x, y) in a.iter_mut().zip(c.iter_mut()) {
                    *x = rng.sample(StandardNormal);
                    *y = rng.sample(StandardNormal);
                }
            });
        NodeSet {
            z1,
            z2,
            w: vec![1.0 / n as f64; n],
            is_monte_carlo: true,
        }
    }
}
