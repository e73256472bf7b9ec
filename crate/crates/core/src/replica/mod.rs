//! Asymptotic description of self-training in the proportional limit.
//!
//! Each step `t` is summarized by order parameters `(q, χ, m, R, B)` and their
//! conjugates `(Q̂, χ̂, m̂, R̂)`, found as the fixed point of a pair of maps:
//! closed-form updates of the order parameters from the conjugates, and
//! Gaussian averages of the loss gradient over the effective one-point
//! problem for the conjugates. Step `t` depends on step `t - 1` only through
//! its order parameters, so the trajectory is solved forwards in time.

mod expectations;
mod quadrature;
mod sampling;

pub use expectations::{effective_logit_minimize, Moments};
pub use quadrature::{Backend, NodeSet, QuadratureSpec, Rule1D};
pub use sampling::{sample_effective_logits, sample_effective_weights, EffectiveLogits};

use crate::error::{Error, Result};
use crate::gmm::MixtureConfig;
use crate::losses::{LossSpec, PlLink};
use crate::special::gen_error_from_moments;
use expectations::{evaluate, Field, PrevField};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    pub q: f64,
    pub chi: f64,
    pub m: f64,
    /// Overlap with the previous step's weights; absent at `t = 0`.
    pub r: Option<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugateParams {
    pub qhat: f64,
    pub chihat: f64,
    pub mhat: f64,
    /// Absent at `t = 0`.
    pub rhat: Option<f64>,
}

impl ConjugateParams {
    fn as_array(&self) -> [f64; 4] {
        [self.qhat, self.chihat, self.mhat, self.rhat.unwrap_or(0.0)]
    }

    fn damp(&self, new: &ConjugateParams, eta: f64) -> ConjugateParams {
        let mix = |a: f64, b: f64| (1.0 - eta) * a + eta * b;
        ConjugateParams {
            qhat: mix(self.qhat, new.qhat),
            chihat: mix(self.chihat, new.chihat),
            mhat: mix(self.mhat, new.mhat),
            rhat: match (self.rhat, new.rhat) {
                (Some(a), Some(b)) => Some(mix(a, b)),
                _ => new.rhat,
            },
        }
    }

    fn max_diff(&self, other: &ConjugateParams) -> f64 {
        let (a, b) = (self.as_array(), other.as_array());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

/// Damped fixed-point iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointOptions {
    /// Weight `η` of the new conjugates in each damped update.
    pub damping: f64,
    /// Convergence threshold on the largest mismatch between the conjugates and their image.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            damping: 0.5,
            tol: 1e-8,
            max_sweeps: 5000,
        }
    }
}

impl FixedPointOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("solver.tol", "must be > 0"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::config("solver.max_sweeps", "must be positive"));
        }
        Ok(())
    }
}

/// Data model, losses and ridge strengths of one self-training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mixture: MixtureConfig,
    pub loss: LossSpec,
    pub lambda_l: f64,
    pub lambda_u: f64,
    /// Keep the bias at its `t = 0` value for all later steps.
    #[serde(default)]
    pub bias_fixed: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.loss.validate()?;
        for (name, v) in [("lambda_l", self.lambda_l), ("lambda_u", self.lambda_u)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Solution at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleStep {
    pub t: usize,
    pub lambda: f64,
    pub theta: OrderParams,
    pub hat: ConjugateParams,
    /// `q - m^2`, tracked separately to avoid cancellation at small ridge.
    pub w_var: f64,
    /// `q - R^2/q_prev` (zero at `t = 0`).
    pub cond_var: f64,
    pub eps_g: f64,
    /// `m / sqrt(q)`.
    pub cos_sim: f64,
    pub accept_rate: f64,
    pub iterations: usize,
    /// Largest mismatch between the conjugates and their image at the last sweep.
    pub residual: f64,
    pub converged: bool,
    /// Sweeps in which the direct form of `q - R^2/q_prev` went negative.
    pub psd_clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleTrajectory {
    pub steps: Vec<SaddleStep>,
}

impl SaddleTrajectory {
    pub fn converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }

    pub fn last(&self) -> &SaddleStep {
        self.steps.last().expect("trajectory has at least the t = 0 step")
    }

    pub fn max_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.residual).fold(0.0, f64::max)
    }
}

/// Test error predicted from the order parameters, on the unlabeled-domain mixture.
pub fn rs_gen_error(theta: &OrderParams, mixture: &MixtureConfig) -> Result<f64> {
    if !(theta.q > 0.0) {
        return Err(Error::InvalidArgument(format!("q must be > 0, got {}", theta.q)));
    }
    Ok(gen_error_from_moments(theta.q, theta.m, theta.bias, mixture.rho_u, mixture.delta_u))
}

fn use_gauss_hermite(quad: &QuadratureSpec, loss: &LossSpec, t: usize) -> bool {
    match quad.backend {
        Backend::GaussHermite => true,
        Backend::MonteCarlo => false,
        Backend::Auto => t == 0 || (loss.pls_threshold == 0.0 && loss.pl_link != PlLink::Hard),
    }
}

/// Quadrature nodes and warm starts for one step.
struct StepNodes {
    nodes: NodeSet,
    warm: Vec<f64>,
    rule: Rule1D,
}

/// Where the pseudo-labeler makes the `ξ1` integrand steep or discontinuous, in
/// standard normal units: `(ramps as (centre, width), jumps)`.
fn z1_features(loss: &LossSpec, t: usize, prev: &OrderParams, delta: f64) -> (Vec<(f64, f64)>, Vec<f64>) {
    let sd1 = (prev.q * delta).sqrt();
    let gain = loss.pl_input_gain(t);
    let threshold = loss.pls_threshold * prev.q.sqrt();
    let (mut ramps, mut jumps) = (Vec::new(), Vec::new());
    for s in [1.0, -1.0] {
        let centre = s * prev.m + prev.bias;
        let at = |b: f64| (b - centre) / sd1;
        match loss.pl_link {
            PlLink::Sigmoid | PlLink::AnnealedSigmoid => {
                let width = 1.0 / (gain * sd1);
                // a ramp wider than the unit pieces is already smooth for Gauss–Hermite
                if width < 1.0 {
                    ramps.push((at(0.0), width));
                }
            }
            PlLink::Hard => jumps.push(at(0.0)),
            PlLink::Identity => {}
        }
        if threshold > 0.0 {
            jumps.push(at(threshold));
            jumps.push(at(-threshold));
        }
    }
    (ramps, jumps)
}

/// Gauss–Legendre points per piece of the graded `ξ1` rule.
const GRADED_POINTS: usize = 6;

impl StepNodes {
    fn new(quad: &QuadratureSpec, loss: &LossSpec, t: usize, prev: Option<(&OrderParams, f64)>) -> StepNodes {
        let nodes = if use_gauss_hermite(quad, loss, t) {
            match prev {
                None => NodeSet::gauss_hermite_1d(quad.gh_nodes),
                Some((p, delta)) => {
                    let (ramps, jumps) = z1_features(loss, t, p, delta);
                    let r2 = Rule1D::gauss_hermite(quad.gh_nodes);
                    if ramps.is_empty() && jumps.is_empty() {
                        NodeSet::tensor(&r2, &r2)
                    } else {
                        NodeSet::tensor(&Rule1D::graded(&ramps, &jumps, GRADED_POINTS), &r2)
                    }
                }
            }
        } else {
            NodeSet::monte_carlo(quad.mc_samples, quad.seed, t)
        };
        let warm = vec![f64::NAN; 2 * nodes.len()];
        StepNodes {
            nodes,
            warm,
            rule: Rule1D::gauss_hermite(quad.gh_nodes),
        }
    }

    fn eval(&mut self, field: &Field) -> Result<Moments> {
        evaluate(field, &self.nodes, &mut self.warm, &self.rule)
    }
}

const BIAS_LIMIT: f64 = 50.0;
const BIAS_TOL: f64 = 1e-10;

/// Root of `B -> E[g]`, which is increasing. Newton steps safeguarded by the
/// bracket that the sign of each residual provides; returns the moments at the root.
fn solve_bias_with(nodes: &mut StepNodes, field: &mut Field, start: f64) -> Result<Moments> {
    let (mut lo, mut hi) = (-BIAS_LIMIT, BIAS_LIMIT);
    let mut b = start.clamp(lo, hi);
    for _ in 0..200 {
        field.bias = b;
        let mom = nodes.eval(field)?;
        let r = mom.e_g();
        if r.abs() <= BIAS_TOL {
            return Ok(mom);
        }
        if r > 0.0 {
            hi = b;
        } else {
            lo = b;
        }
        let slope = mom.e_dg_dh();
        let mut next = if slope > 0.0 { b - r / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if hi - lo <= 1e-14 * (1.0 + b.abs()) || next == b {
            break;
        }
        b = next;
    }
    field.bias = -BIAS_LIMIT;
    let r_lo = nodes.eval(field)?.e_g();
    field.bias = BIAS_LIMIT;
    let r_hi = nodes.eval(field)?.e_g();
    if r_lo < 0.0 && r_hi > 0.0 {
        // bracketed but the tolerance is below what the integrand resolves
        field.bias = b;
        let mom = nodes.eval(field)?;
        return Err(Error::NonConvergence {
            solver: "bias",
            iterations: 200,
            residual: mom.e_g().abs(),
        });
    }
    if r_lo == 0.0 && r_hi == 0.0 {
        return Err(Error::AllRejected);
    }
    Err(Error::BiasBracket {
        lo: -BIAS_LIMIT,
        hi: BIAS_LIMIT,
        r_lo,
        r_hi,
    })
}

fn conjugates(mom: &Moments, alpha: f64, delta: f64, with_r: bool) -> ConjugateParams {
    ConjugateParams {
        qhat: alpha * delta * mom.e_dg_dh(),
        chihat: alpha * delta * mom.e_g2(),
        mhat: -alpha * mom.e_sg(),
        rhat: with_r.then(|| -alpha * delta * mom.e_dg_dht()),
    }
}

/// Order parameters at `t = 0` implied by the conjugates.
fn theta_from_hat_t0(hat: &ConjugateParams, lambda: f64) -> Result<(OrderParams, f64)> {
    let d = hat.qhat + lambda;
    if !(d > 0.0) {
        return Err(Error::NonFinite("Q̂ + λ <= 0"));
    }
    let w_var = hat.chihat / (d * d);
    let m = hat.mhat / d;
    Ok((
        OrderParams {
            q: w_var + m * m,
            chi: 1.0 / d,
            m,
            r: None,
            bias: 0.0,
        },
        w_var,
    ))
}

/// Order parameters at `t >= 1`; returns `(θ, q - m^2, q - R^2/q_p, direct q - R^2/q_p)`.
fn theta_from_hat_t(hat: &ConjugateParams, lambda: f64, prev: &SaddleStep) -> Result<(OrderParams, f64, f64, f64)> {
    let d = hat.qhat + lambda;
    if !(d > 0.0) {
        return Err(Error::NonFinite("Q̂ + λ <= 0"));
    }
    let rhat = hat.rhat.unwrap_or(hat.qhat);
    let (q_p, m_p, v_p) = (prev.theta.q, prev.theta.m, prev.w_var);
    let m = (hat.mhat + rhat * m_p) / d;
    let r = (hat.mhat * m_p + rhat * q_p) / d;
    let w_var = (hat.chihat + rhat * rhat * v_p) / (d * d);
    let q = w_var + m * m;
    let cond_var = (hat.mhat * hat.mhat * v_p / q_p + hat.chihat) / (d * d);
    let direct = q - r * r / q_p;
    Ok((
        OrderParams {
            q,
            chi: 1.0 / d,
            m,
            r: Some(r),
            bias: prev.theta.bias,
        },
        w_var,
        cond_var.max(0.0),
        direct,
    ))
}

/// Initial conjugates for the supervised step.
pub fn default_initial_hat() -> ConjugateParams {
    ConjugateParams {
        qhat: 1.0,
        chihat: 0.1,
        mhat: 0.1,
        rhat: None,
    }
}

/// Supervised step: damped iteration on `(Q̂, χ̂, m̂)` with the bias re-solved every sweep.
pub fn fixed_point_t0(
    mixture: &MixtureConfig,
    loss: &LossSpec,
    lambda_l: f64,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
) -> Result<SaddleStep> {
    fixed_point_t0_with_alpha(mixture, loss, lambda_l, mixture.alpha_l, quad, opts)
}

/// Supervised learning on `α N` labeled points; with `α = α_L + T α_U` this is the
/// reference that self-training is compared against.
pub fn supervised_baseline(
    mixture: &MixtureConfig,
    loss: &LossSpec,
    lambda: f64,
    alpha: f64,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
) -> Result<SaddleStep> {
    fixed_point_t0_with_alpha(mixture, loss, lambda, alpha, quad, opts)
}

fn fixed_point_t0_with_alpha(
    mixture: &MixtureConfig,
    loss: &LossSpec,
    lambda: f64,
    alpha: f64,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
) -> Result<SaddleStep> {
    opts.validate()?;
    loss.validate()?;
    if !(lambda > 0.0) {
        return Err(Error::config("lambda_l", "must be > 0"));
    }
    let mut nodes = StepNodes::new(quad, loss, 0, None);
    let mut hat = default_initial_hat();
    let mut bias = 0.0;
    let mut residual = f64::INFINITY;
    let mut out = None;
    for sweep in 1..=opts.max_sweeps {
        let (mut theta, w_var) = theta_from_hat_t0(&hat, lambda)?;
        let mut field = Field {
            loss: *loss,
            rho: mixture.rho_l,
            delta: mixture.delta_l,
            c: theta.chi * mixture.delta_l,
            m: theta.m,
            bias,
            prev: None,
            q: theta.q,
        };
        let mom = solve_bias_with(&mut nodes, &mut field, bias)?;
        bias = field.bias;
        theta.bias = bias;
        let new = conjugates(&mom, alpha, mixture.delta_l, false);
        residual = new.max_diff(&hat);
        let converged = residual < opts.tol;
        out = Some((theta, hat, w_var, mom, sweep, converged));
        if converged {
            break;
        }
        hat = hat.damp(&new, opts.damping);
        if !hat.as_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("conjugate parameters"));
        }
    }
    let (theta, hat, w_var, mom, iterations, converged) = out.expect("at least one sweep");
    Ok(SaddleStep {
        t: 0,
        lambda,
        theta,
        hat,
        w_var,
        cond_var: 0.0,
        eps_g: rs_gen_error(&theta, mixture)?,
        cos_sim: theta.m / theta.q.sqrt(),
        accept_rate: mom.accept_rate(),
        iterations,
        residual,
        converged,
        psd_clips: 0,
    })
}

/// Self-training step `t >= 1`, warm-started at the previous step's conjugates.
///
/// `fixed_bias` freezes the bias (bias-fixing); otherwise it solves the
/// stationarity condition every sweep.
#[allow(clippy::too_many_arguments)]
pub fn fixed_point_t(
    prev: &SaddleStep,
    mixture: &MixtureConfig,
    loss: &LossSpec,
    lambda_u: f64,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
    t: usize,
    fixed_bias: Option<f64>,
) -> Result<SaddleStep> {
    fixed_point_t_from(prev, None, mixture, loss, lambda_u, quad, opts, t, fixed_bias)
}

/// As [`fixed_point_t`], with an optional starting guess `(Θ̂, B)` in place of the previous step's.
#[allow(clippy::too_many_arguments)]
fn fixed_point_t_from(
    prev: &SaddleStep,
    start: Option<(ConjugateParams, f64)>,
    mixture: &MixtureConfig,
    loss: &LossSpec,
    lambda_u: f64,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
    t: usize,
    fixed_bias: Option<f64>,
) -> Result<SaddleStep> {
    opts.validate()?;
    loss.validate()?;
    if t == 0 {
        return Err(Error::InvalidArgument("self-training steps start at t = 1".into()));
    }
    if !(lambda_u > 0.0) {
        return Err(Error::config("lambda_u", "must be > 0"));
    }
    let mut nodes = StepNodes::new(quad, loss, t, Some((&prev.theta, mixture.delta_u)));
    let (mut hat, start_bias) = start.unwrap_or((prev.hat, prev.theta.bias));
    if hat.rhat.is_none() {
        hat.rhat = Some(hat.qhat);
    }
    let mut bias = fixed_bias.unwrap_or(start_bias);
    let q_p = prev.theta.q;
    let mut residual = f64::INFINITY;
    let mut psd_clips = 0;
    let mut out = None;
    for sweep in 1..=opts.max_sweeps {
        let (mut theta, w_var, cond_var, direct) = theta_from_hat_t(&hat, lambda_u, prev)?;
        if direct < -1e-10 * q_p.max(1.0) && direct < -1e3 * f64::EPSILON * theta.q {
            return Err(Error::NegativeVariance(direct));
        }
        if direct < 0.0 {
            psd_clips += 1;
        }
        let pf = PrevField {
            q_p,
            m_p: prev.theta.m,
            b_p: prev.theta.bias,
            r_coef: theta.r.unwrap() / q_p.sqrt(),
            var2: cond_var,
            gain: loss.pl_input_gain(t),
            threshold: loss.pls_threshold * q_p.sqrt(),
        };
        let mut field = Field {
            loss: *loss,
            rho: mixture.rho_u,
            delta: mixture.delta_u,
            c: theta.chi * mixture.delta_u,
            m: theta.m,
            bias,
            prev: Some(pf),
            q: theta.q,
        };
        let mom = match fixed_bias {
            Some(_) => nodes.eval(&field)?,
            None => solve_bias_with(&mut nodes, &mut field, bias)?,
        };
        bias = field.bias;
        theta.bias = bias;
        let new = conjugates(&mom, mixture.alpha_u, mixture.delta_u, true);
        residual = new.max_diff(&hat);
        let converged = residual < opts.tol;
        out = Some((theta, hat, w_var, cond_var, mom, sweep, converged));
        if converged {
            break;
        }
        hat = hat.damp(&new, opts.damping);
        if !hat.as_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("conjugate parameters"));
        }
    }
    let (theta, hat, w_var, cond_var, mom, iterations, converged) = out.expect("at least one sweep");
    Ok(SaddleStep {
        t,
        lambda: lambda_u,
        theta,
        hat,
        w_var,
        cond_var,
        eps_g: rs_gen_error(&theta, mixture)?,
        cos_sim: theta.m / theta.q.sqrt(),
        accept_rate: mom.accept_rate(),
        iterations,
        residual,
        converged,
        psd_clips,
    })
}

/// Solves `t = 0, 1, ..., T` in order.
pub fn solve_trajectory(scenario: &Scenario, quad: &QuadratureSpec, opts: &FixedPointOptions) -> Result<SaddleTrajectory> {
    scenario.validate()?;
    quad.validate()?;
    let mix = &scenario.mixture;
    let first = fixed_point_t0(mix, &scenario.loss, scenario.lambda_l, quad, opts).map_err(|e| e.at_step(0))?;
    let fixed = scenario.bias_fixed.then_some(first.theta.bias);
    let mut steps = vec![first];
    for t in 1..=mix.n_batches {
        let start = (t >= 3).then(|| extrapolate(&steps[t - 2], &steps[t - 1], scenario.lambda_u)).flatten();
        let next = fixed_point_t_from(&steps[t - 1], start, mix, &scenario.loss, scenario.lambda_u, quad, opts, t, fixed)
            .map_err(|e| e.at_step(t))?;
        steps.push(next);
    }
    Ok(SaddleTrajectory { steps })
}

/// Linear prediction of the next step's conjugates and bias from the last two,
/// when it stays inside the valid region.
fn extrapolate(a: &SaddleStep, b: &SaddleStep, lambda: f64) -> Option<(ConjugateParams, f64)> {
    let lin = |x: f64, y: f64| 2.0 * y - x;
    let hat = ConjugateParams {
        qhat: lin(a.hat.qhat, b.hat.qhat),
        chihat: lin(a.hat.chihat, b.hat.chihat),
        mhat: lin(a.hat.mhat, b.hat.mhat),
        rhat: Some(lin(a.hat.rhat?, b.hat.rhat?)),
    };
    let ok = hat.qhat + lambda > 0.0 && hat.chihat >= 0.0 && hat.as_array().iter().all(|v| v.is_finite());
    ok.then_some((hat, lin(a.theta.bias, b.theta.bias)))
}

/// One evaluation of the supervised conjugate map at given order parameters.
/// The bias in `theta` is used as given.
pub fn inner_expectations_t0(
    theta: &OrderParams,
    loss: &LossSpec,
    mixture: &MixtureConfig,
    quad: &QuadratureSpec,
) -> Result<(ConjugateParams, Moments)> {
    check_theta(theta)?;
    let mut nodes = StepNodes::new(quad, loss, 0, None);
    let field = Field {
        loss: *loss,
        rho: mixture.rho_l,
        delta: mixture.delta_l,
        c: theta.chi * mixture.delta_l,
        m: theta.m,
        bias: theta.bias,
        prev: None,
        q: theta.q,
    };
    let mom = nodes.eval(&field)?;
    Ok((conjugates(&mom, mixture.alpha_l, mixture.delta_l, false), mom))
}

/// One evaluation of the self-training conjugate map at step `t`.
pub fn inner_expectations_t(
    theta_prev: &OrderParams,
    theta: &OrderParams,
    loss: &LossSpec,
    mixture: &MixtureConfig,
    quad: &QuadratureSpec,
    t: usize,
) -> Result<(ConjugateParams, Moments)> {
    check_theta(theta)?;
    check_theta(theta_prev)?;
    let r = theta.r.ok_or_else(|| Error::InvalidArgument("R is required for t >= 1".into()))?;
    let q_p = theta_prev.q;
    let var2 = theta.q - r * r / q_p;
    if var2 < -1e-10 {
        return Err(Error::NegativeVariance(var2));
    }
    let mut nodes = StepNodes::new(quad, loss, t, Some((theta_prev, mixture.delta_u)));
    let field = Field {
        loss: *loss,
        rho: mixture.rho_u,
        delta: mixture.delta_u,
        c: theta.chi * mixture.delta_u,
        m: theta.m,
        bias: theta.bias,
        prev: Some(PrevField {
            q_p,
            m_p: theta_prev.m,
            b_p: theta_prev.bias,
            r_coef: r / q_p.sqrt(),
            var2: var2.max(0.0),
            gain: loss.pl_input_gain(t),
            threshold: loss.pls_threshold * q_p.sqrt(),
        }),
        q: theta.q,
    };
    let mom = nodes.eval(&field)?;
    Ok((conjugates(&mom, mixture.alpha_u, mixture.delta_u, true), mom))
}

/// Bias solving the stationarity condition with every other parameter of `theta` held.
pub fn solve_bias(
    theta_prev: Option<&OrderParams>,
    theta: &OrderParams,
    loss: &LossSpec,
    mixture: &MixtureConfig,
    quad: &QuadratureSpec,
    t: usize,
) -> Result<(f64, Moments)> {
    check_theta(theta)?;
    let mut nodes = StepNodes::new(quad, loss, t, theta_prev.filter(|_| t > 0).map(|p| (p, mixture.delta_u)));
    let mut field = match (t, theta_prev) {
        (0, _) => Field {
            loss: *loss,
            rho: mixture.rho_l,
            delta: mixture.delta_l,
            c: theta.chi * mixture.delta_l,
            m: theta.m,
            bias: theta.bias,
            prev: None,
            q: theta.q,
        },
        (_, Some(p)) => {
            let r = theta.r.ok_or_else(|| Error::InvalidArgument("R is required for t >= 1".into()))?;
            Field {
                loss: *loss,
                rho: mixture.rho_u,
                delta: mixture.delta_u,
                c: theta.chi * mixture.delta_u,
                m: theta.m,
                bias: theta.bias,
                prev: Some(PrevField {
                    q_p: p.q,
                    m_p: p.m,
                    b_p: p.bias,
                    r_coef: r / p.q.sqrt(),
                    var2: (theta.q - r * r / p.q).max(0.0),
                    gain: loss.pl_input_gain(t),
                    threshold: loss.pls_threshold * p.q.sqrt(),
                }),
                q: theta.q,
            }
        }
        (_, None) => return Err(Error::InvalidArgument("previous order parameters are required for t >= 1".into())),
    };
    let mom = solve_bias_with(&mut nodes, &mut field, theta.bias)?;
    Ok((field.bias, mom))
}

fn check_theta(theta: &OrderParams) -> Result<()> {
    if !(theta.q > 0.0 && theta.chi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "q and chi must be > 0, got q={} chi={}",
            theta.q, theta.chi
        )));
    }
    Ok(())
}
