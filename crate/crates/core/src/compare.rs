//! Replica predictions against finite-size runs: per-step z-scores of the
//! seed-averaged macroscopics and KS distances between the empirical weight
//! and logit distributions and samples of the effective processes.

use crate::error::{Error, Result};
use crate::replica::{
    sample_effective_logits, sample_effective_weights, solve_trajectory, FixedPointOptions, QuadratureSpec,
    SaddleStep, SaddleTrajectory, Scenario,
};
use crate::simulator::{run_st, StRunConfig, StStep, StTrace};
use crate::stats::{ks_two_sample, mean_se};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Q,
    M,
    Bias,
    EpsG,
    CosSim,
}

impl Observable {
    fn theory(self, s: &SaddleStep) -> f64 {
        match self {
            Observable::Q => s.theta.q,
            Observable::M => s.theta.m,
            Observable::Bias => s.theta.bias,
            Observable::EpsG => s.eps_g,
            Observable::CosSim => s.cos_sim,
        }
    }

    fn empirical(self, s: &StStep) -> f64 {
        match self {
            Observable::Q => s.q_bar,
            Observable::M => s.m_bar,
            Observable::Bias => s.bias,
            Observable::EpsG => s.eps_g,
            Observable::CosSim => s.cos_sim,
        }
    }
}

/// Seeds run at one system size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeCell {
    pub n_dim: usize,
    pub n_seeds: usize,
}

/// Seed sizes used when none are given: 50 at N = 128, 20 at 1024, 10 at 8192.
pub fn default_cells() -> Vec<SizeCell> {
    vec![
        SizeCell { n_dim: 128, n_seeds: 50 },
        SizeCell { n_dim: 1024, n_seeds: 20 },
        SizeCell { n_dim: 8192, n_seeds: 10 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSettings {
    pub cells: Vec<SizeCell>,
    /// Steps entering the z-score table; all steps when `None`.
    pub steps: Option<Vec<usize>>,
    pub observables: Vec<Observable>,
    pub z_max: f64,
    pub ks_threshold: f64,
    /// Draws from each effective process.
    pub ks_samples: usize,
    /// Step whose distributions are compared; the last step when `None`.
    pub ks_step: Option<usize>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            cells: default_cells(),
            steps: None,
            observables: vec![Observable::Q, Observable::M, Observable::Bias],
            z_max: 3.0,
            ks_threshold: 0.03,
            ks_samples: 1_000_000,
            ks_step: None,
            newton_tol: 1e-10,
            newton_max_iter: 200,
        }
    }
}

impl CompareSettings {
    pub fn validate(&self, n_batches: usize) -> Result<()> {
        if self.cells.is_empty() || self.cells.iter().any(|c| c.n_dim == 0 || c.n_seeds < 2) {
            return Err(Error::config("compare.cells", "need at least one cell, each with n_dim > 0 and n_seeds >= 2"));
        }
        if let Some(steps) = &self.steps {
            if steps.is_empty() || steps.iter().any(|&t| t > n_batches) {
                return Err(Error::config("compare.steps", format!("must be a non-empty subset of 0..={n_batches}")));
            }
        }
        if self.ks_step.is_some_and(|t| t > n_batches) {
            return Err(Error::config("compare.ks_step", format!("must be at most {n_batches}")));
        }
        if self.observables.is_empty() {
            return Err(Error::config("compare.observables", "must not be empty"));
        }
        if !(self.z_max > 0.0) || !(self.ks_threshold > 0.0 && self.ks_threshold <= 1.0) {
            return Err(Error::config("compare", "z_max must be > 0 and ks_threshold in (0, 1]"));
        }
        if self.ks_samples < 1000 {
            return Err(Error::config("compare.ks_samples", "must be at least 1000"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZRow {
    pub n_dim: usize,
    pub t: usize,
    pub observable: Observable,
    pub theory: f64,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KsTarget {
    Weights,
    AcceptedLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsRow {
    pub n_dim: usize,
    pub t: usize,
    pub target: KsTarget,
    pub statistic: f64,
    pub threshold: f64,
    pub n_empirical: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ZRow>,
    pub ks: Vec<KsRow>,
    pub max_abs_z: f64,
    /// All `|z| <= z_max` and every KS statistic below its threshold.
    pub pass: bool,
}

impl ComparisonReport {
    fn finish(rows: Vec<ZRow>, ks: Vec<KsRow>, z_max: f64) -> Self {
        let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        let pass = rows.iter().all(|r| r.z.abs() <= z_max) && ks.iter().all(|k| k.statistic < k.threshold);
        ComparisonReport { rows, ks, max_abs_z, pass }
    }
}

/// Everything a comparison produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub theory: SaddleTrajectory,
    /// `(n_dim, seed, trace)` in cell order.
    pub traces: Vec<(usize, u64, StTrace)>,
    /// Effective-process draws behind the KS rows; the logits are the accepted ones.
    pub effective_weights: Vec<f64>,
    pub effective_logits: Vec<f64>,
}

fn z_score(mean: f64, se: f64, theory: f64) -> f64 {
    let d = mean - theory;
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(d)
    }
}

/// Solves the scenario once, runs every `(N, seed)` cell and aggregates.
/// Seed `k` of every cell is `seed + k`.
///
/// KS statistics use the first seed of the largest cell.
pub fn compare_theory_experiment(
    scenario: &Scenario,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
    settings: &CompareSettings,
    seed: u64,
) -> Result<Comparison> {
    let t_max = scenario.mixture.n_batches;
    settings.validate(t_max)?;
    let cells = &settings.cells;
    let theory = solve_trajectory(scenario, quad, opts)?;

    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .flat_map(|c| (0..c.n_seeds as u64).map(move |k| (c.n_dim, seed + k)))
        .collect();
    let traces: Vec<(usize, u64, StTrace)> = jobs
        .par_iter()
        .map(|&(n_dim, seed)| {
            let mut mixture = scenario.mixture;
            mixture.n_dim = n_dim;
            let cfg = StRunConfig {
                mixture,
                loss: scenario.loss,
                lambda_l: scenario.lambda_l,
                lambda_u: scenario.lambda_u,
                bias_fixed: scenario.bias_fixed,
                newton_tol: settings.newton_tol,
                newton_max_iter: settings.newton_max_iter,
            };
            run_st(&cfg, seed).map(|tr| (n_dim, seed, tr))
        })
        .collect::<Result<_>>()?;

    let steps: Vec<usize> = settings.steps.clone().unwrap_or_else(|| (0..=t_max).collect());
    let mut rows = Vec::new();
    for c in cells.iter() {
        let runs: Vec<&StTrace> = traces.iter().filter(|(n, _, _)| *n == c.n_dim).map(|(_, _, tr)| tr).collect();
        for &t in &steps {
            for &obs in &settings.observables {
                let vals: Vec<f64> = runs.iter().map(|tr| obs.empirical(&tr.steps[t])).collect();
                let (mean, se) = mean_se(&vals);
                let theory_v = obs.theory(&theory.steps[t]);
                rows.push(ZRow {
                    n_dim: c.n_dim,
                    t,
                    observable: obs,
                    theory: theory_v,
                    mean,
                    se,
                    z: z_score(mean, se, theory_v),
                });
            }
        }
    }

    let big = cells.iter().map(|c| c.n_dim).max().expect("cells is non-empty");
    let (_, ks_seed, ks_trace) = traces.iter().find(|(n, _, _)| *n == big).expect("largest cell ran");
    let t_ks = settings.ks_step.unwrap_or(t_max);
    let step = &ks_trace.steps[t_ks];
    let mut ks = Vec::new();
    let effective_weights = sample_effective_weights(&theory, settings.ks_samples, ks_seed ^ 0x5eed)?.swap_remove(t_ks);
    ks.push(KsRow {
        n_dim: big,
        t: t_ks,
        target: KsTarget::Weights,
        statistic: ks_two_sample(&step.params.weights, &effective_weights),
        threshold: settings.ks_threshold,
        n_empirical: step.params.weights.len(),
    });
    let mut effective_logits = Vec::new();
    if t_ks > 0 {
        let eff = sample_effective_logits(
            &theory,
            &scenario.loss,
            &scenario.mixture,
            settings.ks_samples,
            ks_seed ^ 0x5eed,
            t_ks,
        )?;
        effective_logits = eff.accepted_logits();
        ks.push(KsRow {
            n_dim: big,
            t: t_ks,
            target: KsTarget::AcceptedLogits,
            statistic: ks_two_sample(&step.train_logits, &effective_logits),
            threshold: settings.ks_threshold,
            n_empirical: step.train_logits.len(),
        });
    }

    Ok(Comparison {
        report: ComparisonReport::finish(rows, ks, settings.z_max),
        theory,
        traces,
        effective_weights,
        effective_logits,
    })
}
