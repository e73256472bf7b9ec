//! Draws from the effective single-coordinate weight process and the
//! effective logit distribution implied by a solved trajectory.

use super::{effective_logit_minimize, SaddleTrajectory};
use crate::error::{Error, Result};
use crate::gmm::MixtureConfig;
use crate::losses::LossSpec;
use crate::rng::{stream, Purpose};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const BLOCK: usize = 4096;

/// `n_samples` i.i.d. weight paths; `paths[t][i]` is coordinate `i` at step `t`.
///
/// Each path follows `w⁰ = (m̂⁰ + √χ̂⁰ ξ)/(Q̂⁰ + λ_L)` and
/// `wᵗ = (m̂ᵗ + R̂ᵗ wᵗ⁻¹ + √χ̂ᵗ ξ)/(Q̂ᵗ + λ_U)` with fresh standard normals.
pub fn sample_effective_weights(traj: &SaddleTrajectory, n_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut coefs = Vec::with_capacity(traj.steps.len());
    for s in &traj.steps {
        if s.hat.chihat < -1e-12 {
            return Err(Error::NegativeVariance(s.hat.chihat));
        }
        let d = s.hat.qhat + s.lambda;
        coefs.push((s.hat.mhat / d, s.hat.rhat.unwrap_or(0.0) / d, s.hat.chihat.max(0.0).sqrt() / d));
    }
    let mut paths = vec![vec![0.0; n_samples]; coefs.len()];
    for (t, &(a, r, sd)) in coefs.iter().enumerate() {
        let (done, rest) = paths.split_at_mut(t);
        let prev = done.last();
        rest[0].par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| {
            let mut rng = stream(seed, Purpose::EffectiveWeights, t as u64, b as u64);
            for (j, w) in chunk.iter_mut().enumerate() {
                let xi: f64 = rng.sample(StandardNormal);
                let carry = prev.map_or(0.0, |p| r * p[b * BLOCK + j]);
                *w = a + carry + sd * xi;
            }
        });
    }
    Ok(paths)
}

/// Samples of the effective one-point problem at a self-training step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EffectiveLogits {
    pub y: Vec<u8>,
    pub h_tilde: Vec<f64>,
    /// `h + u*`, the logit at the optimum.
    pub logit: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl EffectiveLogits {
    pub fn accepted_logits(&self) -> Vec<f64> {
        self.logit.iter().zip(&self.accepted).filter(|(_, &a)| a).map(|(z, _)| *z).collect()
    }

    pub fn accept_fraction(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len() as f64
    }
}

/// Draws `(y, h̃, h + u*)` for step `t >= 1` from the local fields of the
/// converged order parameters at steps `t - 1` and `t`.
pub fn sample_effective_logits(
    traj: &SaddleTrajectory,
    loss: &LossSpec,
    mixture: &MixtureConfig,
    n_samples: usize,
    seed: u64,
    t: usize,
) -> Result<EffectiveLogits> {
    if t == 0 || t >= traj.steps.len() {
        return Err(Error::InvalidArgument(format!(
            "t must lie in 1..={}, got {t}",
            traj.steps.len().saturating_sub(1)
        )));
    }
    let (prev, cur) = (&traj.steps[t - 1], &traj.steps[t]);
    let (q_p, m_p, b_p) = (prev.theta.q, prev.theta.m, prev.theta.bias);
    let th = cur.theta;
    let r = th.r.ok_or_else(|| Error::InvalidArgument("step has no R".into()))?;
    let r_coef = r / q_p.sqrt();
    let sd2 = cur.cond_var.max(0.0).sqrt();
    let delta = mixture.delta_u;
    let sd = delta.sqrt();

    let blocks: Vec<Result<EffectiveLogits>> = (0..n_samples.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, Purpose::EffectiveLogits, t as u64, b as u64);
            let n = BLOCK.min(n_samples - b * BLOCK);
            let mut out = EffectiveLogits::default();
            for _ in 0..n {
                let y = u8::from(rng.gen::<f64>() < mixture.rho_u);
                let s = if y == 1 { 1.0 } else { -1.0 };
                let xi1 = sd * rng.sample::<f64, _>(StandardNormal);
                let xi2 = sd * rng.sample::<f64, _>(StandardNormal);
                let ht = s * m_p + b_p + q_p.sqrt() * xi1;
                let h = s * th.m + th.bias + r_coef * xi1 + sd2 * xi2;
                let (u, _) = effective_logit_minimize(loss, th.chi, delta, ht, h, q_p, t)?;
                out.y.push(y);
                out.h_tilde.push(ht);
                out.logit.push(h + u);
                out.accepted.push(loss.accepts(ht, q_p));
            }
            Ok(out)
        })
        .collect();
    let mut all = EffectiveLogits::default();
    for b in blocks {
        let b = b?;
        all.y.extend(b.y);
        all.h_tilde.extend(b.h_tilde);
        all.logit.extend(b.logit);
        all.accepted.extend(b.accepted);
    }
    Ok(all)
}
