//! Small-ridge limit of self-training.
//!
//! With `t̃ = λ_U t` as continuous time and squared losses, the squared cosine
//! `M = m²/q` follows a logistic curve and `m`, `B` relax exponentially. For
//! general losses the per-step change of `M` is first order in `λ_U`, with a
//! rate estimated here from replica solutions at two ridge values.

use crate::error::{Error, Result};
use crate::gmm::MixtureConfig;
use crate::losses::{LossKind, LossSpec, PlLink};
use crate::replica::{
    fixed_point_t, solve_trajectory, FixedPointOptions, QuadratureSpec, SaddleStep, SaddleTrajectory, Scenario,
};
use crate::stats::loglog_slope;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Initial condition and time constants of the squared-loss continuum dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuumState {
    /// Squared cosine at `t̃ = 0`.
    pub big_m0: f64,
    pub m0: f64,
    pub b0: f64,
    pub rho_u: f64,
    pub delta_u: f64,
    pub alpha_u: f64,
    /// Label variance `4ρ(1-ρ)`.
    pub v_u: f64,
    pub tau_big_m: f64,
    pub tau_m: f64,
}

impl ContinuumState {
    pub fn new(big_m0: f64, m0: f64, b0: f64, rho_u: f64, delta_u: f64, alpha_u: f64) -> Result<Self> {
        if !(big_m0 > 0.0 && big_m0 <= 1.0) {
            return Err(Error::InvalidArgument(format!("M0 must lie in (0, 1], got {big_m0}")));
        }
        if !(alpha_u > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "the continuum limit needs alpha_u > 1, got {alpha_u}"
            )));
        }
        if !(delta_u > 0.0) || !(0.0..=1.0).contains(&rho_u) {
            return Err(Error::InvalidArgument("need delta_u > 0 and rho_u in [0, 1]".into()));
        }
        let v_u = 4.0 * rho_u * (1.0 - rho_u);
        Ok(ContinuumState {
            big_m0,
            m0,
            b0,
            rho_u,
            delta_u,
            alpha_u,
            v_u,
            tau_big_m: 0.5 * (delta_u / v_u) * (alpha_u - 1.0) * (delta_u + v_u),
            tau_m: (alpha_u - 1.0) * (delta_u + v_u),
        })
    }

    /// Starts the continuum dynamics from a solved supervised step.
    pub fn from_step(step: &SaddleStep, mixture: &MixtureConfig) -> Result<Self> {
        let th = &step.theta;
        Self::new(
            th.m * th.m / th.q,
            th.m,
            th.bias,
            mixture.rho_u,
            mixture.delta_u,
            mixture.alpha_u,
        )
    }

    /// Rate `1/τ_M` of the logistic growth of `M`.
    pub fn rate(&self) -> f64 {
        1.0 / self.tau_big_m
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("continuous time must be >= 0, got {t}")));
    }
    Ok(())
}

/// `M(t̃) = 1 / (1 + (1/M0 - 1) e^{-t̃/τ_M})`.
pub fn closed_form_big_m(state: &ContinuumState, t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(1.0 / (1.0 + (1.0 / state.big_m0 - 1.0) * (-t / state.tau_big_m).exp()))
}

/// `(m(t̃), B(t̃))`.
pub fn closed_form_m_b(state: &ContinuumState, t: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    let decay = (-t / state.tau_m).exp();
    Ok((
        state.m0 * decay,
        state.b0 + (2.0 * state.rho_u - 1.0) * state.m0 * (1.0 - decay),
    ))
}

/// One line of the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimCheck {
    pub claim: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ClaimCheck {
    fn relative(claim: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        ClaimCheck {
            claim: claim.into(),
            measured,
            expected,
            tolerance,
            pass: ((measured - expected) / expected).abs() <= tolerance,
        }
    }

    fn absolute(claim: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        ClaimCheck {
            claim: claim.into(),
            measured,
            expected,
            tolerance,
            pass: (measured - expected).abs() <= tolerance,
        }
    }
}

/// Settings for the small-ridge checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbativeConfig {
    /// `α_U > 1`; `n_batches` sets how many steps enter the growth-rate check.
    pub mixture: MixtureConfig,
    pub loss: LossSpec,
    pub lambda_l: f64,
    /// Ridge values for the scaling exponents at `t = 1`.
    pub slope_grid: Vec<f64>,
    /// Ridge at which the growth rate is measured; the half value is used for extrapolation.
    pub lambda_rate: f64,
}

impl PerturbativeConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.loss.validate()?;
        if self.loss.pls_threshold != 0.0 {
            return Err(Error::config("loss.pls_threshold", "the small-ridge checks assume no selection"));
        }
        if !(self.mixture.alpha_u > 1.0) {
            return Err(Error::config("mixture.alpha_u", "must exceed 1"));
        }
        if self.mixture.n_batches == 0 {
            return Err(Error::config("mixture.n_batches", "must be positive"));
        }
        if self.slope_grid.len() < 2 || self.slope_grid.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("slope_grid", "needs at least two positive ridge values"));
        }
        if !(self.lambda_rate > 0.0 && self.lambda_l > 0.0) {
            return Err(Error::config("lambda_rate", "ridge values must be > 0"));
        }
        Ok(())
    }
}

/// Growth-rate estimate at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateStep {
    pub t: usize,
    /// `2 m̂₁ / (Q̂₀ m^{(t-1)})`.
    pub rate: f64,
    pub big_m_prev: f64,
    /// Change of `M` over the step at `lambda_rate`.
    pub delta_big_m: f64,
    /// `rate M(1-M) λ`.
    pub predicted: f64,
    /// `|ΔM - predicted| / |predicted|` at `lambda_rate` and at half of it.
    pub rel_residual: f64,
    pub rel_residual_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbativeReport {
    pub chihat_slope: f64,
    pub cond_var_slope: f64,
    pub steps: Vec<RateStep>,
    pub checks: Vec<ClaimCheck>,
}

impl PerturbativeReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn big_m(s: &SaddleStep) -> f64 {
    s.theta.m * s.theta.m / s.theta.q
}

fn require_converged(s: &SaddleStep) -> Result<()> {
    if !s.converged {
        return Err(Error::NonConvergence {
            solver: "fixed point",
            iterations: s.iterations,
            residual: s.residual,
        });
    }
    Ok(())
}

/// Small-ridge exponent and growth-rate checks from replica solutions.
pub fn check_perturbative_claims(
    cfg: &PerturbativeConfig,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
) -> Result<PerturbativeReport> {
    cfg.validate()?;
    let mix = cfg.mixture;
    let mut one = mix;
    one.n_batches = 0;
    let first = crate::replica::fixed_point_t0(&one, &cfg.loss, cfg.lambda_l, quad, opts)?;
    require_converged(&first)?;

    // exponents at t = 1 from a common supervised start
    let at_one: Vec<SaddleStep> = cfg
        .slope_grid
        .par_iter()
        .map(|&l| fixed_point_t(&first, &mix, &cfg.loss, l, quad, opts, 1, None))
        .collect::<Result<_>>()?;
    at_one.iter().try_for_each(require_converged)?;
    let chihat_slope = loglog_slope(&cfg.slope_grid, &at_one.iter().map(|s| s.hat.chihat).collect::<Vec<_>>());
    let cond_var_slope = loglog_slope(&cfg.slope_grid, &at_one.iter().map(|s| s.cond_var).collect::<Vec<_>>());

    // growth rate along the trajectories at λ and λ/2
    let lam = cfg.lambda_rate;
    let scenario = |l: f64| Scenario {
        mixture: mix,
        loss: cfg.loss,
        lambda_l: cfg.lambda_l,
        lambda_u: l,
        bias_fixed: false,
    };
    let trajs: Vec<SaddleTrajectory> = [lam, 0.5 * lam]
        .par_iter()
        .map(|&l| solve_trajectory(&scenario(l), quad, opts))
        .collect::<Result<_>>()?;
    trajs.iter().flat_map(|tr| &tr.steps).try_for_each(require_converged)?;

    let mut steps = Vec::new();
    for t in 1..=mix.n_batches {
        let prev = &trajs[0].steps[t - 1];
        let half = fixed_point_t(prev, &mix, &cfg.loss, 0.5 * lam, quad, opts, t, None)?;
        require_converged(&half)?;
        let full = &trajs[0].steps[t];
        // m̂ = m̂₁ λ + O(λ²) and Q̂ = Q̂₀ + O(λ); two-point extrapolation removes the O(λ) parts
        let mhat1 = 2.0 * half.hat.mhat / (0.5 * lam) - full.hat.mhat / lam;
        let qhat0 = 2.0 * half.hat.qhat - full.hat.qhat;
        let rate = 2.0 * mhat1 / (qhat0 * prev.theta.m);
        let mp = big_m(prev);
        let predicted = rate * mp * (1.0 - mp) * lam;
        let delta_big_m = big_m(full) - mp;

        let prev_h = &trajs[1].steps[t - 1];
        let mp_h = big_m(prev_h);
        let pred_h = rate * mp_h * (1.0 - mp_h) * 0.5 * lam;
        let delta_h = big_m(&trajs[1].steps[t]) - mp_h;
        steps.push(RateStep {
            t,
            rate,
            big_m_prev: mp,
            delta_big_m,
            predicted,
            rel_residual: ((delta_big_m - predicted) / predicted).abs(),
            rel_residual_half: ((delta_h - pred_h) / pred_h).abs(),
        });
    }

    let mut checks = vec![
        ClaimCheck::absolute("chihat_exponent", chihat_slope, 2.0, 0.2),
        ClaimCheck::absolute("cond_var_exponent", cond_var_slope, 2.0, 0.2),
    ];
    let worst = steps.iter().map(|s| s.rel_residual).fold(0.0, f64::max);
    checks.push(ClaimCheck::absolute("delta_m_vs_rate", worst, 0.0, 0.1));
    let halving = steps.iter().map(|s| s.rel_residual_half / s.rel_residual).sum::<f64>() / steps.len() as f64;
    checks.push(ClaimCheck::absolute("residual_halving_ratio", halving, 0.5, 0.15));
    if cfg.loss.loss == crate::losses::LossKind::Squared {
        let v = 4.0 * mix.rho_u * (1.0 - mix.rho_u);
        let mean_rate = steps.iter().map(|s| s.rate).sum::<f64>() / steps.len() as f64;
        let stated = 2.0 * v / ((mix.alpha_u - 1.0) * (mix.delta_u + v));
        checks.push(ClaimCheck::relative("squared_rate_closed_form", mean_rate, stated, 0.05));
        let st = ContinuumState::new(0.5, 1.0, 0.0, mix.rho_u, mix.delta_u, mix.alpha_u)?;
        checks.push(ClaimCheck::relative("squared_rate_vs_tau_m", mean_rate, st.rate(), 0.05));
    }
    Ok(PerturbativeReport {
        chihat_slope,
        cond_var_slope,
        steps,
        checks,
    })
}

/// Replica and continuum values at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuumPoint {
    pub t: usize,
    /// `λ_U t`.
    pub t_tilde: f64,
    pub big_m_replica: f64,
    pub big_m_closed: f64,
    pub m_replica: f64,
    pub m_closed: f64,
    pub bias_replica: f64,
    pub bias_closed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuumComparison {
    pub state: ContinuumState,
    pub points: Vec<ContinuumPoint>,
    /// Largest `|M_replica - M_closed|` over the trajectory.
    pub max_abs_dev: f64,
}

/// Solves a squared-loss trajectory and sets it against the continuum curves
/// started from its own supervised step.
pub fn compare_continuum(
    scenario: &Scenario,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
) -> Result<ContinuumComparison> {
    let l = &scenario.loss;
    if l.loss != LossKind::Squared || l.pl_loss != LossKind::Squared || l.pl_link != PlLink::Identity {
        return Err(Error::config("loss", "the continuum curves hold for squared losses with identity pseudo-labels"));
    }
    if l.pls_threshold != 0.0 {
        return Err(Error::config("loss.pls_threshold", "the continuum curves assume no selection"));
    }
    let traj = solve_trajectory(scenario, quad, opts)?;
    let state = ContinuumState::from_step(&traj.steps[0], &scenario.mixture)?;
    let points = traj
        .steps
        .iter()
        .map(|s| {
            let t_tilde = scenario.lambda_u * s.t as f64;
            let (m_closed, bias_closed) = closed_form_m_b(&state, t_tilde)?;
            Ok(ContinuumPoint {
                t: s.t,
                t_tilde,
                big_m_replica: big_m(s),
                big_m_closed: closed_form_big_m(&state, t_tilde)?,
                m_replica: s.theta.m,
                m_closed,
                bias_replica: s.theta.bias,
                bias_closed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_abs_dev = points
        .iter()
        .map(|p| (p.big_m_replica - p.big_m_closed).abs())
        .fold(0.0, f64::max);
    Ok(ContinuumComparison {
        state,
        points,
        max_abs_dev,
    })
}
