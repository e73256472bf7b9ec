//! Two-cluster spherical Gaussian mixture data.
//!
//! A row is `x = (2y - 1) v / sqrt(N) + z` with `v = (1, ..., 1)` and
//! `z ~ N(0, Δ I)`. Labeled rows use `(ρ_L, Δ_L)`; the unlabeled batch of
//! step `t` uses `(ρ_U, Δ_U)` and a stream keyed by `t`.

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, BLOCK_ROWS};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    /// Input dimension `N`.
    pub n_dim: usize,
    pub rho_l: f64,
    pub rho_u: f64,
    pub delta_l: f64,
    pub delta_u: f64,
    pub alpha_l: f64,
    pub alpha_u: f64,
    /// Number of self-training steps `T`.
    pub n_batches: usize,
}

impl MixtureConfig {
    /// Same cluster fraction and noise in both domains.
    pub fn symmetric(n_dim: usize, rho: f64, delta: f64, alpha_l: f64, alpha_u: f64, n_batches: usize) -> Self {
        MixtureConfig {
            n_dim,
            rho_l: rho,
            rho_u: rho,
            delta_l: delta,
            delta_u: delta,
            alpha_l,
            alpha_u,
            n_batches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dim == 0 {
            return Err(Error::config("mixture.n_dim", "must be positive"));
        }
        for (name, rho) in [("mixture.rho_l", self.rho_l), ("mixture.rho_u", self.rho_u)] {
            if !(rho > 0.0 && rho <= 0.5) {
                return Err(Error::config(name, format!("must lie in (0, 0.5], got {rho}")));
            }
        }
        for (name, v) in [
            ("mixture.delta_l", self.delta_l),
            ("mixture.delta_u", self.delta_u),
            ("mixture.alpha_l", self.alpha_l),
            ("mixture.alpha_u", self.alpha_u),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `M_L = round(α_L N)`.
    pub fn m_labeled(&self) -> usize {
        (self.alpha_l * self.n_dim as f64).round() as usize
    }

    /// `M_U = round(α_U N)`.
    pub fn m_unlabeled(&self) -> usize {
        (self.alpha_u * self.n_dim as f64).round() as usize
    }

    /// `ρ_U(1 - ρ_U) * 4`, the variance of the ±1 label.
    pub fn label_variance_u(&self) -> f64 {
        4.0 * self.rho_u * (1.0 - self.rho_u)
    }
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature buffer has the wrong length");
        Features { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Features::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Labeled,
    /// Unlabeled batch consumed at step `t >= 1`.
    Unlabeled(usize),
}

/// A sample of rows with their labels.
///
/// For unlabeled batches the labels are kept only so that errors and plots
/// can be audited; [`Dataset::labels`] refuses to hand them out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Features,
    labels: Vec<u8>,
    domain: Domain,
}

impl Dataset {
    pub fn new(features: Features, labels: Vec<u8>, domain: Domain) -> Self {
        assert_eq!(features.rows(), labels.len());
        Dataset { features, labels, domain }
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Training labels; `None` for unlabeled batches.
    pub fn labels(&self) -> Option<&[u8]> {
        match self.domain {
            Domain::Labeled => Some(&self.labels),
            Domain::Unlabeled(_) => None,
        }
    }

    /// Ground-truth labels, for evaluation only.
    pub fn ground_truth_for_evaluation(&self) -> &[u8] {
        &self.labels
    }
}

/// Draws the labeled set of `M_L` rows.
pub fn sample_labeled(config: &MixtureConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let m = config.m_labeled();
    if m == 0 {
        return Err(Error::config("mixture.alpha_l", "round(alpha_l * n_dim) is zero"));
    }
    let (features, labels) = sample_rows(config.n_dim, m, config.rho_l, config.delta_l, seed, Purpose::Labeled, 0);
    Ok(Dataset::new(features, labels, Domain::Labeled))
}

/// Draws the unlabeled batch used at step `t`, `1 <= t <= T`.
pub fn sample_unlabeled_batch(config: &MixtureConfig, t: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if t == 0 || t > config.n_batches {
        return Err(Error::InvalidArgument(format!(
            "unlabeled batch index {t} outside 1..={}",
            config.n_batches
        )));
    }
    let m = config.m_unlabeled();
    if m == 0 {
        return Err(Error::config("mixture.alpha_u", "round(alpha_u * n_dim) is zero"));
    }
    let (features, labels) = sample_rows(config.n_dim, m, config.rho_u, config.delta_u, seed, Purpose::Unlabeled, t as u64);
    Ok(Dataset::new(features, labels, Domain::Unlabeled(t)))
}

fn sample_rows(n: usize, m: usize, rho: f64, delta: f64, seed: u64, purpose: Purpose, t: u64) -> (Features, Vec<u8>) {
    let mut data = vec![0.0f64; n * m];
    let mut labels = vec![0u8; m];
    let sd = delta.sqrt();
    let shift = 1.0 / (n as f64).sqrt();
    data.par_chunks_mut(BLOCK_ROWS * n)
        .zip(labels.par_chunks_mut(BLOCK_ROWS))
        .enumerate()
        .for_each(|(b, (block, ys))| {
            let mut rng = stream(seed, purpose, t, b as u64);
            for (row, y) in block.chunks_exact_mut(n).zip(ys.iter_mut()) {
                *y = u8::from(rng.gen::<f64>() < rho);
                let c = if *y == 1 { shift } else { -shift };
                for x in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = c + sd * z;
                }
            }
        });
    (Features::new(m, n, data), labels)
}
