//! Matrix-free truncated Newton for ridge-regularized generalized linear fits.
//!
//! Minimizes `Σ_k l(p_k, x_k·w/√N + B) + λ/2 |w|^2` over `(w, B)`, or over
//! `w` alone when the bias is frozen. Hessian-vector products take one pass
//! over the rows, and the row projections of the search direction are
//! accumulated during CG so the line search costs `O(M)` per trial.

use crate::error::{Error, Result};
use crate::gmm::Features;
use crate::losses::PointLoss;
use crate::special::{axpy, dot};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop once the gradient max-norm is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub newton_iterations: usize,
    pub cg_iterations: usize,
    pub grad_norm: f64,
}

pub(crate) struct Problem<'a> {
    pub x: &'a Features,
    /// Rows entering the loss.
    pub rows: &'a [usize],
    /// Per-row targets, aligned with `rows`.
    pub targets: &'a [f64],
    pub loss: PointLoss,
    pub lambda: f64,
    pub bias_fixed: bool,
}

const MAX_CG: usize = 1000;

impl Problem<'_> {
    fn scale(&self) -> f64 {
        1.0 / (self.x.cols() as f64).sqrt()
    }

    /// Objective, gradient and row logits in one pass.
    fn value_grad(&self, w: &[f64], b: f64, z: &mut [f64], gw: &mut [f64]) -> (f64, f64) {
        let s = self.scale();
        gw.iter_mut().for_each(|g| *g = 0.0);
        let (mut f, mut gb) = (0.0, 0.0);
        for (k, &i) in self.rows.iter().enumerate() {
            let row = self.x.row(i);
            let zk = dot(row, w) * s + b;
            z[k] = zk;
            let p = self.targets[k];
            f += self.loss.value(p, zk);
            let d = self.loss.d2(p, zk);
            gb += d;
            axpy(d * s, row, gw);
        }
        axpy(self.lambda, w, gw);
        f += 0.5 * self.lambda * dot(w, w);
        (f, gb)
    }

    /// `H d` given per-row curvatures; also returns the row projections of `d`.
    fn hess_vec(&self, curv: &[f64], dw: &[f64], db: f64, hw: &mut [f64], xd: &mut [f64]) -> f64 {
        let s = self.scale();
        hw.iter_mut().for_each(|h| *h = 0.0);
        let mut hb = 0.0;
        for (k, &i) in self.rows.iter().enumerate() {
            let row = self.x.row(i);
            let proj = dot(row, dw) * s + db;
            xd[k] = proj;
            let c = curv[k] * proj;
            hb += c;
            axpy(c * s, row, hw);
        }
        axpy(self.lambda, dw, hw);
        hb
    }

    fn line_value(&self, z: &[f64], xd: &[f64], step: f64, ww: f64, wd: f64, dd: f64) -> f64 {
        let mut f = 0.0;
        for k in 0..z.len() {
            f += self.loss.value(self.targets[k], z[k] + step * xd[k]);
        }
        f + 0.5 * self.lambda * (ww + 2.0 * step * wd + step * step * dd)
    }
}

fn max_abs(v: &[f64], extra: f64) -> f64 {
    v.iter().fold(extra.abs(), |m, x| m.max(x.abs()))
}

/// Runs truncated Newton from `(w, b)` in place.
pub(crate) fn minimize(problem: &Problem, w: &mut [f64], b: &mut f64, opts: SolverOptions) -> Result<SolveStats> {
    let n = w.len();
    let k = problem.rows.len();
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::NonFinite("initial parameters"));
    }
    let mut z = vec![0.0; k];
    let mut gw = vec![0.0; n];
    let mut curv = vec![0.0; k];
    let mut dw = vec![0.0; n];
    let mut xd = vec![0.0; k];
    let mut rw = vec![0.0; n];
    let mut pw = vec![0.0; n];
    let mut hw = vec![0.0; n];
    let mut xp = vec![0.0; k];
    let mut cg_total = 0;
    let fix = problem.bias_fixed;

    for iter in 0..=opts.max_iter {
        let (f0, gb_raw) = problem.value_grad(w, *b, &mut z, &mut gw);
        let gb = if fix { 0.0 } else { gb_raw };
        if !f0.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let gnorm = max_abs(&gw, gb);
        if gnorm <= opts.tol {
            return Ok(SolveStats {
                newton_iterations: iter,
                cg_iterations: cg_total,
                grad_norm: gnorm,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::NonConvergence {
                solver: "newton",
                iterations: iter,
                residual: gnorm,
            });
        }
        for (c, &zk) in curv.iter_mut().zip(&z) {
            *c = problem.loss.d22(zk);
        }

        // CG on H d = -g, started at d = 0.
        let g2 = dot(&gw, &gw) + gb * gb;
        let forcing = g2.sqrt().sqrt().min(0.5);
        let target = forcing * g2.sqrt();
        dw.iter_mut().for_each(|d| *d = 0.0);
        xd.iter_mut().for_each(|d| *d = 0.0);
        let mut db = 0.0;
        for (r, g) in rw.iter_mut().zip(&gw) {
            *r = -g;
        }
        let mut rb = -gb;
        pw.copy_from_slice(&rw);
        let mut pb = rb;
        let mut rr = g2;
        for _ in 0..MAX_CG {
            let hb_raw = problem.hess_vec(&curv, &pw, pb, &mut hw, &mut xp);
            let hb = if fix { 0.0 } else { hb_raw };
            cg_total += 1;
            let php = dot(&pw, &hw) + pb * hb;
            if !(php > 0.0) {
                break;
            }
            let a = rr / php;
            axpy(a, &pw, &mut dw);
            db += a * pb;
            axpy(a, &xp, &mut xd);
            axpy(-a, &hw, &mut rw);
            rb -= a * hb;
            let rr_new = dot(&rw, &rw) + rb * rb;
            if rr_new.sqrt() <= target {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for (p, r) in pw.iter_mut().zip(&rw) {
                *p = r + beta * *p;
            }
            pb = rb + beta * pb;
        }

        let mut slope = dot(&gw, &dw) + gb * db;
        if !(slope < 0.0) {
            // steepest descent fallback; recompute the row projections
            for (d, g) in dw.iter_mut().zip(&gw) {
                *d = -g;
            }
            db = -gb;
            for (kk, &i) in problem.rows.iter().enumerate() {
                xd[kk] = dot(problem.x.row(i), &dw) * problem.scale() + db;
            }
            slope = -g2;
        }

        let (ww, wd, dd) = (dot(w, w), dot(w, &dw), dot(&dw, &dw));
        let mut step = 1.0;
        // When the predicted decrease is below the rounding noise of the objective,
        // Armijo tests are meaningless; the full Newton step is taken.
        let mut accepted = -slope <= 1e-11 * (1.0 + f0.abs());
        for _ in 0..60 {
            if accepted {
                break;
            }
            let f = problem.line_value(&z, &xd, step, ww, wd, dd);
            if f <= f0 + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // At this scale the decrease is below roundoff of the objective.
            let f1 = problem.line_value(&z, &xd, 1.0, ww, wd, dd);
            if f1 <= f0 + 1e-13 * (1.0 + f0.abs()) {
                step = 1.0;
            } else {
                return Err(Error::NonConvergence {
                    solver: "newton line search",
                    iterations: iter,
                    residual: gnorm,
                });
            }
        }
        axpy(step, &dw, w);
        if !fix {
            *b += step * db;
        }
    }
    unreachable!()
}
