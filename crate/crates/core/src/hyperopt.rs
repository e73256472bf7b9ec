//! Nelder–Mead search over ridge strengths, selection threshold and annealing
//! rate, scored by the predicted test error after the last step.

use crate::error::{Error, Result};
use crate::losses::PlLink;
use crate::replica::{solve_trajectory, FixedPointOptions, QuadratureSpec, Scenario};
use serde::{Deserialize, Serialize};

/// Box `[lo, hi]` per coordinate, searched through `x = lo + (hi - lo) σ(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Bounds> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument("bounds need matching, non-empty lengths".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidArgument("each lower bound must be finite and below its upper bound".into()));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn to_box(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) };
                self.lo[i] + (self.hi[i] - self.lo[i]) * s
            })
            .collect()
    }

    /// Inverse of [`Bounds::to_box`]; points on the boundary are pulled inside by a relative `1e-12`.
    pub fn to_unconstrained(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = ((v - self.lo[i]) / (self.hi[i] - self.lo[i])).clamp(1e-12, 1.0 - 1e-12);
                (p / (1.0 - p)).ln()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NelderMeadOptions {
    /// Stop once every vertex is within this distance (max-norm, box coordinates) of the best.
    pub x_tol: f64,
    /// Stop once the objective spread over the simplex is below this.
    pub f_tol: f64,
    pub max_eval: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            x_tol: 1e-6,
            f_tol: 1e-10,
            max_eval: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub index: usize,
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    /// False when `max_eval` ran out first.
    pub converged: bool,
    pub history: Vec<Evaluation>,
}

/// Minimizes `f` over the box. Non-finite values are treated as `+inf`.
pub fn nelder_mead_minimize(
    f: impl Fn(&[f64]) -> f64,
    bounds: &Bounds,
    init: &[f64],
    opts: &NelderMeadOptions,
) -> Result<OptResult> {
    let n = bounds.dim();
    if init.len() != n {
        return Err(Error::InvalidArgument(format!("initial point has {} coordinates, expected {n}", init.len())));
    }
    if opts.max_eval < n + 1 {
        return Err(Error::InvalidArgument("max_eval must cover the initial simplex".into()));
    }
    let mut history = Vec::new();
    let eval = |u: &[f64], history: &mut Vec<Evaluation>| {
        let x = bounds.to_box(u);
        let v = f(&x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        history.push(Evaluation {
            index: history.len(),
            point: x,
            value: v,
        });
        v
    };

    // initial simplex: the start and one step of 10% of the span per coordinate
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let u0 = bounds.to_unconstrained(init);
    let f0 = eval(&u0, &mut history);
    simplex.push((u0, f0));
    for i in 0..n {
        let mut x = init.to_vec();
        let step = 0.1 * (bounds.hi[i] - bounds.lo[i]);
        x[i] = if x[i] + step < bounds.hi[i] { x[i] + step } else { x[i] - step };
        let u = bounds.to_unconstrained(&x);
        let v = eval(&u, &mut history);
        simplex.push((u, v));
    }

    let centroid = |s: &[(Vec<f64>, f64)]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        for (u, _) in &s[..n] {
            for (ci, ui) in c.iter_mut().zip(u) {
                *ci += ui / n as f64;
            }
        }
        c
    };
    let along = |c: &[f64], w: &[f64], coef: f64| -> Vec<f64> { c.iter().zip(w).map(|(a, b)| a + coef * (b - a)).collect() };

    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best_x = bounds.to_box(&simplex[0].0);
        let diameter = simplex[1..]
            .iter()
            .map(|(u, _)| {
                let x = bounds.to_box(u);
                x.iter().zip(&best_x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let spread = simplex[n].1 - simplex[0].1;
        if diameter < opts.x_tol || spread.abs() < opts.f_tol {
            converged = true;
            break;
        }
        if history.len() >= opts.max_eval {
            break;
        }
        let c = centroid(&simplex);
        let worst = simplex[n].clone();
        let ur = along(&c, &worst.0, -1.0);
        let fr = eval(&ur, &mut history);
        if fr < simplex[0].1 {
            let ue = along(&c, &worst.0, -2.0);
            let fe = eval(&ue, &mut history);
            simplex[n] = if fe < fr { (ue, fe) } else { (ur, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (ur, fr);
            continue;
        }
        // contraction, outside if the reflection improved on the worst vertex
        let (uc, fc) = if fr < worst.1 {
            let u = along(&c, &ur, 0.5);
            let v = eval(&u, &mut history);
            (u, v)
        } else {
            let u = along(&c, &worst.0, 0.5);
            let v = eval(&u, &mut history);
            (u, v)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (uc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let u = along(&best, &v.0, 0.5);
            let fv = eval(&u, &mut history);
            *v = (u, fv);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = history
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one evaluation");
    Ok(OptResult {
        best: best.point.clone(),
        best_value: best.value,
        evaluations: history.len(),
        converged,
        history,
    })
}

/// Tunable hyperparameters of a self-training scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPoint {
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub pls_threshold: f64,
    pub anneal_rate: f64,
}

impl HyperPoint {
    pub fn of(s: &Scenario) -> HyperPoint {
        HyperPoint {
            lambda_l: s.lambda_l,
            lambda_u: s.lambda_u,
            pls_threshold: s.loss.pls_threshold,
            anneal_rate: s.loss.anneal_rate,
        }
    }

    pub fn apply(&self, base: &Scenario) -> Scenario {
        let mut s = *base;
        s.lambda_l = self.lambda_l;
        s.lambda_u = self.lambda_u;
        s.loss.pls_threshold = self.pls_threshold;
        s.loss.anneal_rate = self.anneal_rate;
        s
    }

    fn get(&self, i: usize) -> f64 {
        [self.lambda_l, self.lambda_u, self.pls_threshold, self.anneal_rate][i]
    }

    fn set(&mut self, i: usize, v: f64) {
        match i {
            0 => self.lambda_l = v,
            1 => self.lambda_u = v,
            2 => self.pls_threshold = v,
            _ => self.anneal_rate = v,
        }
    }
}

/// Search ranges and which hyperparameters move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperBox {
    pub lambda_max: f64,
    pub pls_threshold_max: f64,
    pub anneal_rate_max: f64,
    /// Active flags in the order `lambda_l, lambda_u, pls_threshold, anneal_rate`.
    pub active: [bool; 4],
}

impl Default for HyperBox {
    fn default() -> Self {
        HyperBox {
            lambda_max: 0.1,
            pls_threshold_max: 3.0,
            anneal_rate_max: 1.0,
            active: [true, true, false, false],
        }
    }
}

/// Smallest ridge the search may reach.
pub const LAMBDA_FLOOR: f64 = 1e-8;

impl HyperBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max > LAMBDA_FLOOR && self.lambda_max <= 0.1) {
            return Err(Error::config("box.lambda_max", "must lie in (0, 0.1]"));
        }
        if !(self.pls_threshold_max > 0.0) || !(self.anneal_rate_max > 0.0) {
            return Err(Error::config("box", "upper bounds must be > 0"));
        }
        if !self.active.iter().any(|&a| a) {
            return Err(Error::config("box.active", "at least one hyperparameter must be active"));
        }
        Ok(())
    }

    fn limits(&self, i: usize) -> (f64, f64) {
        match i {
            0 | 1 => (0.0, self.lambda_max),
            2 => (0.0, self.pls_threshold_max),
            _ => (0.0, self.anneal_rate_max),
        }
    }

    pub fn bounds(&self) -> Result<Bounds> {
        let idx: Vec<usize> = (0..4).filter(|&i| self.active[i]).collect();
        Bounds::new(
            idx.iter().map(|&i| self.limits(i).0).collect(),
            idx.iter().map(|&i| self.limits(i).1).collect(),
        )
    }

    fn embed(&self, base: &HyperPoint, x: &[f64]) -> HyperPoint {
        let mut p = *base;
        for (k, i) in (0..4).filter(|&i| self.active[i]).enumerate() {
            let v = if i < 2 { x[k].max(LAMBDA_FLOOR) } else { x[k] };
            p.set(i, v);
        }
        p
    }

    fn project(&self, p: &HyperPoint) -> Vec<f64> {
        (0..4).filter(|&i| self.active[i]).map(|i| p.get(i)).collect()
    }

    /// Midpoint of each active range.
    pub fn midpoint(&self, base: &HyperPoint) -> HyperPoint {
        let mut p = *base;
        for i in (0..4).filter(|&i| self.active[i]) {
            let (lo, hi) = self.limits(i);
            p.set(i, 0.5 * (lo + hi));
        }
        p
    }
}

/// Value returned for a point where the solver fails or does not converge.
pub const FAILURE_PENALTY: f64 = 1.0;

/// Predicted test error after the last step; failures map to `1 + min(residual, 1)`.
pub fn objective_rs_generr(point: &HyperPoint, base: &Scenario, quad: &QuadratureSpec, opts: &FixedPointOptions) -> f64 {
    let sc = point.apply(base);
    if sc.loss.anneal_rate > 0.0 && sc.loss.pl_link != PlLink::AnnealedSigmoid {
        return FAILURE_PENALTY + 1.0;
    }
    match solve_trajectory(&sc, quad, opts) {
        Ok(tr) if tr.converged() => tr.last().eps_g,
        Ok(tr) => FAILURE_PENALTY + tr.max_residual().min(1.0),
        Err(_) => FAILURE_PENALTY + 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperOptOutcome {
    pub best: HyperPoint,
    pub result: OptResult,
    /// Every evaluation, in call order, as a full hyperparameter point.
    pub trace: Vec<HyperEval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperEval {
    pub index: usize,
    pub point: HyperPoint,
    pub objective: f64,
}

/// Tunes the active hyperparameters of `base`; inactive ones keep their values.
pub fn optimize_hyperparameters(
    base: &Scenario,
    hbox: &HyperBox,
    init: Option<HyperPoint>,
    quad: &QuadratureSpec,
    opts: &FixedPointOptions,
    nm: &NelderMeadOptions,
) -> Result<HyperOptOutcome> {
    base.validate()?;
    hbox.validate()?;
    quad.validate()?;
    let start = HyperPoint::of(base);
    let init = init.unwrap_or_else(|| hbox.midpoint(&start));
    let bounds = hbox.bounds()?;
    let result = nelder_mead_minimize(
        |x| objective_rs_generr(&hbox.embed(&start, x), base, quad, opts),
        &bounds,
        &hbox.project(&init),
        nm,
    )?;
    let trace = result
        .history
        .iter()
        .map(|e| HyperEval {
            index: e.index,
            point: hbox.embed(&start, &e.point),
            objective: e.value,
        })
        .collect();
    Ok(HyperOptOutcome {
        best: hbox.embed(&start, &result.best),
        result,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tight() -> NelderMeadOptions {
        NelderMeadOptions {
            x_tol: 1e-9,
            f_tol: 0.0,
            max_eval: 4000,
        }
    }

    #[test]
    fn quadratic_in_ridge_range() {
        let b = Bounds::new(vec![0.0], vec![0.1]).unwrap();
        let r = nelder_mead_minimize(|x| (x[0] - 0.05).powi(2), &b, &[0.02], &tight()).unwrap();
        assert!(r.converged);
        assert!((r.best[0] - 0.05).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let b = Bounds::new(vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap();
        let r = nelder_mead_minimize(rosen, &b, &[-1.0, 1.5], &tight()).unwrap();
        assert!((r.best[0] - 1.0).abs() < 1e-4 && (r.best[1] - 1.0).abs() < 1e-4, "{:?}", r.best);
        // in the unit box the minimizer sits in the corner
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let r = nelder_mead_minimize(rosen, &b, &[0.5, 0.5], &tight()).unwrap();
        assert!((r.best[0] - 1.0).abs() < 1e-4 && (r.best[1] - 1.0).abs() < 1e-4, "{:?}", r.best);
    }

    #[test]
    fn boundary_minimum() {
        let b = Bounds::new(vec![0.0], vec![0.1]).unwrap();
        let opts = NelderMeadOptions {
            x_tol: 1e-6,
            f_tol: 0.0,
            max_eval: 2000,
        };
        let r = nelder_mead_minimize(|x| -x[0], &b, &[0.05], &opts).unwrap();
        assert!((r.best[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let opts = NelderMeadOptions {
            x_tol: 1e-12,
            f_tol: 0.0,
            max_eval: 10,
        };
        let r = nelder_mead_minimize(|x| (x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2), &b, &[0.5, 0.5], &opts).unwrap();
        assert!(!r.converged);
        assert!(r.evaluations <= 12);
        assert!(r.history.iter().all(|e| e.value >= r.best_value));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
        let b = Bounds::new(vec![0.0], vec![1.0]).unwrap();
        assert!(nelder_mead_minimize(|x| x[0], &b, &[0.1, 0.2], &NelderMeadOptions::default()).is_err());
        let hb = HyperBox {
            lambda_max: 0.5,
            ..Default::default()
        };
        assert!(hb.validate().is_err());
    }

    #[test]
    fn objective_is_deterministic_and_optimizer_improves() {
        use crate::gmm::MixtureConfig;
        use crate::losses::LossSpec;
        use crate::replica::Backend;
        let base = Scenario {
            mixture: MixtureConfig::symmetric(1024, 0.4, 0.5625, 0.5, 2.0, 2),
            loss: LossSpec::logistic(),
            lambda_l: 0.05,
            lambda_u: 0.05,
            bias_fixed: false,
        };
        let quad = QuadratureSpec {
            backend: Backend::GaussHermite,
            gh_nodes: 24,
            ..Default::default()
        };
        let opts = FixedPointOptions::default();
        let p = HyperPoint::of(&base);
        let a = objective_rs_generr(&p, &base, &quad, &opts);
        assert_eq!(a, objective_rs_generr(&p, &base, &quad, &opts));
        assert!(a > 0.0 && a < 0.5);
        let nm = NelderMeadOptions {
            x_tol: 1e-4,
            f_tol: 1e-9,
            max_eval: 60,
        };
        let out = optimize_hyperparameters(&base, &HyperBox::default(), Some(p), &quad, &opts, &nm).unwrap();
        assert!(out.result.best_value <= a);
        assert!(out.best.lambda_u > 0.0 && out.best.lambda_u <= 0.1);
        let mut bad = p;
        bad.anneal_rate = 0.5;
        assert!(objective_rs_generr(&bad, &base, &quad, &opts) > FAILURE_PENALTY);
    }

    proptest! {
        #[test]
        fn transform_round_trip(x in 0.001f64..0.999, lo in -5.0f64..5.0, w in 0.01f64..10.0) {
            let b = Bounds::new(vec![lo], vec![lo + w]).unwrap();
            let p = lo + x * w;
            let back = b.to_box(&b.to_unconstrained(&[p]))[0];
            prop_assert!((back - p).abs() < 1e-12 * (1.0 + p.abs()) * w.max(1.0));
        }
    }
}
