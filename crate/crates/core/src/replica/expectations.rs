//! Averages of the loss gradient over the effective single-point problem.
//!
//! For each quadrature node and each label the local field is formed, the
//! proximal problem `min_u u^2/(2χΔ) + l(p, h + u)` is solved, and the
//! gradient `g = ∂l` at the optimum is accumulated together with its implicit
//! derivatives
//!
//! ```text
//! dg/dh  = l'' / (1 + χΔ l'')
//! dg/dh̃ = l_12 / (1 + χΔ l'')
//! ```
//!
//! where `l_12 = -dp/dh̃`. Selection makes `g` jump where `|h̃|` crosses the
//! threshold; that jump enters `E[dg/dh̃]` as a point mass evaluated by a
//! one-dimensional rule on the conditional law of `h` at the boundary.

use super::quadrature::{NodeSet, Rule1D};
use crate::error::{Error, Result};
use crate::losses::{LossSpec, PlLink};
use crate::special::normal_pdf;
use rayon::prelude::*;

/// Accumulated averages. Index order: `E[g]`, `E[dg/dh]`, `E[g^2]`, `E[s g]`, `E[dg/dh̃]`,
/// followed by the acceptance rate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub mean: [f64; 6],
    /// Monte Carlo standard errors; zero for deterministic rules.
    pub se: [f64; 6],
    /// Boundary contribution already included in `mean[4]`.
    pub boundary: f64,
}

impl Moments {
    pub fn e_g(&self) -> f64 {
        self.mean[0]
    }
    pub fn e_dg_dh(&self) -> f64 {
        self.mean[1]
    }
    pub fn e_g2(&self) -> f64 {
        self.mean[2]
    }
    pub fn e_sg(&self) -> f64 {
        self.mean[3]
    }
    pub fn e_dg_dht(&self) -> f64 {
        self.mean[4]
    }
    pub fn accept_rate(&self) -> f64 {
        self.mean[5]
    }
}

/// Everything that fixes the integrand at one step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Field {
    pub loss: LossSpec,
    pub rho: f64,
    pub delta: f64,
    /// `χ Δ`.
    pub c: f64,
    pub m: f64,
    pub bias: f64,
    pub prev: Option<PrevField>,
    /// `q` at `t = 0`; unused afterwards.
    pub q: f64,
}

/// Quantities tied to the previous step (`t >= 1`).
#[derive(Debug, Clone, Copy)]
pub(crate) struct PrevField {
    pub q_p: f64,
    pub m_p: f64,
    pub b_p: f64,
    /// `R / sqrt(q_p)`.
    pub r_coef: f64,
    /// `q - R^2/q_p`, already clipped at zero.
    pub var2: f64,
    /// Pseudo-labeler input gain.
    pub gain: f64,
    /// `Γ sqrt(q_p)`.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Point {
    g: f64,
    dg_dh: f64,
    dg_dht: f64,
    accepted: bool,
}

impl Field {
    #[inline]
    fn labeled_point(&self, y: u8, h: f64, warm: &mut f64) -> Point {
        let l = self.loss.labeled_loss();
        let p = self.loss.label_target(y);
        let z = l.prox(p, h, self.c, *warm);
        *warm = z;
        let (g, d22) = l.d2_d22(p, z);
        Point {
            g,
            dg_dh: d22 / (1.0 + self.c * d22),
            dg_dht: 0.0,
            accepted: true,
        }
    }

    #[inline]
    fn unlabeled_point(&self, pf: &PrevField, ht: f64, h: f64, warm: &mut f64) -> Point {
        if !(ht.abs() > pf.threshold) {
            return Point::default();
        }
        let l = self.loss.pl_point_loss();
        let p = self.loss.pseudo_label(ht, pf.gain);
        let z = l.prox(p, h, self.c, *warm);
        *warm = z;
        let (g, d22) = l.d2_d22(p, z);
        let denom = 1.0 + self.c * d22;
        let d12 = -self.loss.pseudo_label_slope(ht, pf.gain);
        Point {
            g,
            dg_dh: d22 / denom,
            dg_dht: d12 / denom,
            accepted: true,
        }
    }

    /// Gradient at the optimum for a given pseudo-label target.
    #[inline]
    fn grad_at(&self, p: f64, h: f64) -> f64 {
        let l = self.loss.pl_point_loss();
        l.d2(p, l.prox(p, h, self.c, h))
    }

    /// Local fields `(h̃, h)` for label sign `s` at standard normal node `(z1, z2)`.
    #[inline]
    fn fields(&self, pf: &PrevField, s: f64, z1: f64, z2: f64) -> (f64, f64) {
        let sd = self.delta.sqrt();
        let xi1 = sd * z1;
        let ht = s * pf.m_p + pf.b_p + pf.q_p.sqrt() * xi1;
        let h = s * self.m + self.bias + pf.r_coef * xi1 + pf.var2.sqrt() * sd * z2;
        (ht, h)
    }

    /// Point-mass part of `E[dg/dh̃]` from the discontinuities of `g` in `h̃`.
    fn boundary_term(&self, pf: &PrevField, rule: &Rule1D) -> f64 {
        // (location, pseudo-label just below, pseudo-label just above, accepted below, accepted above)
        let mut jumps: Vec<(f64, f64, f64, bool, bool)> = Vec::new();
        let t = pf.threshold;
        if t > 0.0 {
            jumps.push((t, 0.0, self.loss.pseudo_label(t, pf.gain), false, true));
            jumps.push((-t, self.loss.pseudo_label(-t, pf.gain), 0.0, true, false));
        } else if self.loss.pl_link == PlLink::Hard {
            jumps.push((0.0, self.loss.hard_label(false), self.loss.hard_label(true), true, true));
        }
        if jumps.is_empty() {
            return 0.0;
        }
        let sd = self.delta.sqrt();
        let mut total = 0.0;
        for (s, wy) in [(1.0, self.rho), (-1.0, 1.0 - self.rho)] {
            let centre = s * pf.m_p + pf.b_p;
            for &(b, p_lo, p_hi, acc_lo, acc_hi) in &jumps {
                let dens = normal_pdf(b, centre, pf.q_p * self.delta);
                if dens == 0.0 {
                    continue;
                }
                let xi1 = (b - centre) / pf.q_p.sqrt();
                let mut avg = 0.0;
                for (z2, w) in rule.nodes.iter().zip(&rule.weights) {
                    let h = s * self.m + self.bias + pf.r_coef * xi1 + pf.var2.sqrt() * sd * z2;
                    let hi = if acc_hi { self.grad_at(p_hi, h) } else { 0.0 };
                    let lo = if acc_lo { self.grad_at(p_lo, h) } else { 0.0 };
                    avg += w * (hi - lo);
                }
                total += wy * dens * avg;
            }
        }
        total
    }
}

const CHUNK: usize = 2048;

/// Averages over `nodes` and the two labels. `warm` holds one warm start per
/// `(node, label)` and is updated in place.
pub(crate) fn evaluate(field: &Field, nodes: &NodeSet, warm: &mut [f64], boundary_rule: &Rule1D) -> Result<Moments> {
    debug_assert_eq!(warm.len(), 2 * nodes.len());
    let rho = field.rho;
    let partials: Vec<([f64; 6], [f64; 6])> = warm
        .par_chunks_mut(2 * CHUNK)
        .enumerate()
        .map(|(ci, wc)| {
            let start = ci * CHUNK;
            let mut sum = [0.0f64; 6];
            let mut sq = [0.0f64; 6];
            for (j, pair) in wc.chunks_exact_mut(2).enumerate() {
                let k = start + j;
                let (z1, z2, w) = (nodes.z1[k], nodes.z2[k], nodes.w[k]);
                let (pos, neg) = match &field.prev {
                    None => {
                        let sd = (field.q * field.delta).sqrt();
                        let hp = field.m + field.bias + sd * z1;
                        let hn = -field.m + field.bias + sd * z1;
                        let a = field.labeled_point(1, hp, &mut pair[0]);
                        let b = field.labeled_point(0, hn, &mut pair[1]);
                        (a, b)
                    }
                    Some(pf) => {
                        let (htp, hp) = field.fields(pf, 1.0, z1, z2);
                        let (htn, hn) = field.fields(pf, -1.0, z1, z2);
                        let a = field.unlabeled_point(pf, htp, hp, &mut pair[0]);
                        let b = field.unlabeled_point(pf, htn, hn, &mut pair[1]);
                        (a, b)
                    }
                };
                let v = [
                    rho * pos.g + (1.0 - rho) * neg.g,
                    rho * pos.dg_dh + (1.0 - rho) * neg.dg_dh,
                    rho * pos.g * pos.g + (1.0 - rho) * neg.g * neg.g,
                    rho * pos.g - (1.0 - rho) * neg.g,
                    rho * pos.dg_dht + (1.0 - rho) * neg.dg_dht,
                    rho * f64::from(u8::from(pos.accepted)) + (1.0 - rho) * f64::from(u8::from(neg.accepted)),
                ];
                for i in 0..6 {
                    sum[i] += w * v[i];
                    sq[i] += w * v[i] * v[i];
                }
            }
            (sum, sq)
        })
        .collect();

    let mut mean = [0.0f64; 6];
    let mut second = [0.0f64; 6];
    for (s, q) in &partials {
        for i in 0..6 {
            mean[i] += s[i];
            second[i] += q[i];
        }
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quadrature integrand"));
    }
    let mut se = [0.0f64; 6];
    if nodes.is_monte_carlo {
        let n = nodes.len() as f64;
        for i in 0..6 {
            let var = (second[i] - mean[i] * mean[i]).max(0.0) * n / (n - 1.0);
            se[i] = (var / n).sqrt();
        }
    }
    let mut boundary = 0.0;
    if let Some(pf) = &field.prev {
        boundary = field.boundary_term(pf, boundary_rule);
        mean[4] += boundary;
    }
    Ok(Moments { mean, se, boundary })
}

/// Minimizer of `u^2/(2χΔ) + l_U(h̃, h + u)` and the curvature of the loss there.
///
/// A rejected point (`|h̃| <= Γ sqrt(q_prev)`) has `u* = 0` and zero curvature.
pub fn effective_logit_minimize(
    loss: &LossSpec,
    chi: f64,
    delta: f64,
    h_tilde: f64,
    h: f64,
    q_prev: f64,
    t: usize,
) -> Result<(f64, f64)> {
    if !(chi > 0.0 && delta > 0.0 && q_prev > 0.0) {
        return Err(Error::InvalidArgument("chi, delta and q_prev must be > 0".into()));
    }
    if h_tilde.is_nan() || h.is_nan() {
        return Err(Error::NonFinite("effective_logit_minimize"));
    }
    if !loss.accepts(h_tilde, q_prev) {
        return Ok((0.0, 0.0));
    }
    let l = loss.pl_point_loss();
    let p = loss.pseudo_label(h_tilde, loss.pl_input_gain(t));
    let z = l.prox(p, h, chi * delta, h);
    Ok((z - h, l.d22(z)))
}
