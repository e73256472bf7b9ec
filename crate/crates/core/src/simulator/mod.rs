//! Finite-size self-training: a supervised fit on the labeled set, then `T`
//! rounds of pseudo-labeling a fresh unlabeled batch and refitting on it.

mod newton;

pub use newton::{SolveStats, SolverOptions};

use crate::error::{Error, Result};
use crate::gmm::{sample_labeled, sample_unlabeled_batch, Dataset, MixtureConfig};
use crate::losses::LossSpec;
use crate::special::{dot, gen_error_from_moments};
use crate::stats::Histogram;
use newton::{minimize, Problem};
use serde::{Deserialize, Serialize};

/// Weights `ŵ` and bias `B̂` of the linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ModelParams {
    pub fn zeros(n: usize) -> Self {
        ModelParams {
            weights: vec![0.0; n],
            bias: 0.0,
        }
    }

    /// `|ŵ|^2 / N`.
    pub fn q_bar(&self) -> f64 {
        dot(&self.weights, &self.weights) / self.weights.len() as f64
    }

    /// `v·ŵ / N` with `v = (1, ..., 1)`.
    pub fn m_bar(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Logit `x·ŵ/√N + B̂`.
    #[inline]
    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(x, &self.weights) / (self.weights.len() as f64).sqrt() + self.bias
    }
}

/// A fitted model with solver statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub params: ModelParams,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StRunConfig {
    pub mixture: MixtureConfig,
    pub loss: LossSpec,
    /// Ridge strength of the supervised fit.
    pub lambda_l: f64,
    /// Ridge strength of every self-training fit.
    pub lambda_u: f64,
    /// Freeze the bias at the supervised value during self-training.
    #[serde(default)]
    pub bias_fixed: bool,
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_iter")]
    pub newton_max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    200
}

impl StRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.loss.validate()?;
        for (name, v) in [("lambda_l", self.lambda_l), ("lambda_u", self.lambda_u)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::config("newton_tol", "must be > 0"));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::config("newton_max_iter", "must be positive"));
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
        }
    }
}

/// Observables recorded after the fit of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StStep {
    pub t: usize,
    pub params: ModelParams,
    pub q_bar: f64,
    pub m_bar: f64,
    pub bias: f64,
    pub cos_sim: f64,
    pub eps_g: f64,
    /// Fraction of the batch kept by pseudo-label selection (1 at `t = 0`).
    pub accept_frac: f64,
    /// Training logits `x·ŵ^(t)/√N + B̂^(t)` of the points used in the fit.
    pub train_logits: Vec<f64>,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StTrace {
    pub steps: Vec<StStep>,
}

/// Supervised fit on the labeled set, started from zero.
pub fn fit_supervised(data: &Dataset, loss: &LossSpec, lambda_l: f64, opts: SolverOptions) -> Result<Fit> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidArgument("supervised fit needs a labeled dataset".into()))?;
    check_lambda(lambda_l)?;
    check_finite(data)?;
    let targets: Vec<f64> = labels.iter().map(|&y| loss.label_target(y)).collect();
    let rows: Vec<usize> = (0..data.len()).collect();
    let problem = Problem {
        x: data.features(),
        rows: &rows,
        targets: &targets,
        loss: loss.labeled_loss(),
        lambda: lambda_l,
        bias_fixed: false,
    };
    let mut params = ModelParams::zeros(data.features().cols());
    let stats = minimize(&problem, &mut params.weights, &mut params.bias, opts)?;
    Ok(Fit { params, stats })
}

/// Pseudo-labels and the selection mask for the batch of step `t`.
pub fn assign_pseudo_labels(model: &ModelParams, batch: &Dataset, loss: &LossSpec, t: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let q_prev = model.q_bar();
    if !(q_prev > 0.0) {
        return Err(Error::InvalidArgument("previous model has zero weights".into()));
    }
    let gain = loss.pl_input_gain(t);
    let x = batch.features();
    let mut labels = Vec::with_capacity(batch.len());
    let mut mask = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let h = model.logit(x.row(i));
        labels.push(loss.pseudo_label(h, gain));
        mask.push(loss.accepts(h, q_prev));
    }
    Ok((labels, mask))
}

/// Self-training refit on the accepted points of `batch`, warm-started at `prev`.
///
/// With `bias_fixed` the bias stays at `prev.bias`.
#[allow(clippy::too_many_arguments)]
pub fn fit_st_step(
    batch: &Dataset,
    pseudo_labels: &[f64],
    accept_mask: &[bool],
    prev: &ModelParams,
    loss: &LossSpec,
    lambda_u: f64,
    bias_fixed: bool,
    opts: SolverOptions,
) -> Result<Fit> {
    check_lambda(lambda_u)?;
    check_finite(batch)?;
    if pseudo_labels.len() != batch.len() || accept_mask.len() != batch.len() {
        return Err(Error::InvalidArgument("pseudo-label arrays do not match the batch".into()));
    }
    let rows: Vec<usize> = (0..batch.len()).filter(|&i| accept_mask[i]).collect();
    if rows.is_empty() && !bias_fixed {
        return Err(Error::AllRejected);
    }
    let targets: Vec<f64> = rows.iter().map(|&i| pseudo_labels[i]).collect();
    let problem = Problem {
        x: batch.features(),
        rows: &rows,
        targets: &targets,
        loss: loss.pl_point_loss(),
        lambda: lambda_u,
        bias_fixed,
    };
    let mut params = prev.clone();
    let stats = minimize(&problem, &mut params.weights, &mut params.bias, opts)?;
    Ok(Fit { params, stats })
}

/// Test error of `params` on the unlabeled-domain mixture.
pub fn empirical_gen_error(model: &ModelParams, mixture: &MixtureConfig) -> Result<f64> {
    let q = model.q_bar();
    if !(q > 0.0) {
        return Err(Error::InvalidArgument("q_bar must be > 0".into()));
    }
    Ok(gen_error_from_moments(q, model.m_bar(), model.bias, mixture.rho_u, mixture.delta_u))
}

/// Runs the full procedure. Data for every step is regenerated from `seed`.
pub fn run_st(config: &StRunConfig, seed: u64) -> Result<StTrace> {
    config.validate()?;
    let opts = config.solver();
    let labeled = sample_labeled(&config.mixture, seed)?;
    let fit = fit_supervised(&labeled, &config.loss, config.lambda_l, opts).map_err(|e| e.at_step(0))?;
    let logits: Vec<f64> = (0..labeled.len()).map(|i| fit.params.logit(labeled.features().row(i))).collect();
    drop(labeled);
    let mut steps = vec![record(0, fit, 1.0, logits, &config.mixture).map_err(|e| e.at_step(0))?];

    for t in 1..=config.mixture.n_batches {
        let step = (|| {
            let prev = &steps[t - 1].params;
            let batch = sample_unlabeled_batch(&config.mixture, t, seed)?;
            let (labels, mask) = assign_pseudo_labels(prev, &batch, &config.loss, t)?;
            let fit = fit_st_step(&batch, &labels, &mask, prev, &config.loss, config.lambda_u, config.bias_fixed, opts)?;
            let logits: Vec<f64> = (0..batch.len())
                .filter(|&i| mask[i])
                .map(|i| fit.params.logit(batch.features().row(i)))
                .collect();
            let frac = logits.len() as f64 / batch.len() as f64;
            record(t, fit, frac, logits, &config.mixture)
        })()
        .map_err(|e| e.at_step(t))?;
        steps.push(step);
    }
    Ok(StTrace { steps })
}

fn record(t: usize, fit: Fit, accept_frac: f64, train_logits: Vec<f64>, mixture: &MixtureConfig) -> Result<StStep> {
    let q_bar = fit.params.q_bar();
    let m_bar = fit.params.m_bar();
    let eps_g = empirical_gen_error(&fit.params, mixture)?;
    Ok(StStep {
        t,
        q_bar,
        m_bar,
        bias: fit.params.bias,
        cos_sim: m_bar / q_bar.sqrt(),
        eps_g,
        accept_frac,
        train_logits,
        stats: fit.stats,
        params: fit.params,
    })
}

/// Weight and accepted-logit histograms at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepHistograms {
    pub weights: Histogram,
    /// `None` when selection rejected every point.
    pub logits: Option<Histogram>,
}

pub fn empirical_histograms(trace: &StTrace, t: usize, bins: usize) -> Result<StepHistograms> {
    if bins < 10 {
        return Err(Error::InvalidArgument("at least 10 bins are required".into()));
    }
    let step = trace
        .steps
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("step {t} was not recorded")))?;
    let weights = Histogram::from_data(&step.params.weights, bins).expect("weight vector is never empty");
    Ok(StepHistograms {
        weights,
        logits: Histogram::from_data(&step.train_logits, bins),
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("ridge strength must be > 0, got {lambda}")))
    }
}

fn check_finite(data: &Dataset) -> Result<()> {
    if data.features().as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("features"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{Domain, Features};
    use crate::losses::PlLink;
    use crate::stats::{mean_se, std_dev};

    fn small(n: usize, rho: f64, t: usize) -> StRunConfig {
        StRunConfig {
            mixture: MixtureConfig::symmetric(n, rho, 0.5625, 0.5, 2.0, t),
            loss: LossSpec::logistic(),
            lambda_l: 0.05,
            lambda_u: 0.05,
            bias_fixed: false,
            newton_tol: 1e-10,
            newton_max_iter: 200,
        }
    }

    fn objective(data: &Dataset, loss: &LossSpec, lambda: f64, p: &ModelParams) -> f64 {
        let labels = data.labels().unwrap();
        let l = loss.labeled_loss();
        (0..data.len())
            .map(|i| l.value(loss.label_target(labels[i]), p.logit(data.features().row(i))))
            .sum::<f64>()
            + 0.5 * lambda * dot(&p.weights, &p.weights)
    }

    #[test]
    fn converged_fit_is_a_local_minimum() {
        let cfg = small(128, 0.4, 0);
        let data = sample_labeled(&cfg.mixture, 4).unwrap();
        let fit = fit_supervised(&data, &cfg.loss, 0.05, SolverOptions::default()).unwrap();
        assert!(fit.stats.grad_norm <= 1e-10);
        let f0 = objective(&data, &cfg.loss, 0.05, &fit.params);
        for j in (0..128).step_by(3).take(43).chain(0..7) {
            for d in [1e-4, -1e-4] {
                let mut p = fit.params.clone();
                p.weights[j] += d;
                assert!(objective(&data, &cfg.loss, 0.05, &p) >= f0);
            }
        }
        for d in [1e-4, -1e-4] {
            let mut p = fit.params.clone();
            p.bias += d;
            assert!(objective(&data, &cfg.loss, 0.05, &p) >= f0);
        }
    }

    #[test]
    fn pseudo_label_rules() {
        let n = 16;
        let x = Features::from_rows(&[vec![1.0 / (n as f64).sqrt(); n], vec![0.01; n]]);
        let batch = Dataset::new(x, vec![1, 0], Domain::Unlabeled(1));
        let model = ModelParams {
            weights: vec![1.0; n],
            bias: 0.0,
        };
        let (labels, mask) = assign_pseudo_labels(&model, &batch, &LossSpec::squared(), 1).unwrap();
        assert!((labels[0] - 1.0).abs() < 1e-14);
        assert_eq!(mask, vec![true, true]);
        let mut strict = LossSpec::squared();
        strict.pls_threshold = 1e9;
        let (_, mask) = assign_pseudo_labels(&model, &batch, &strict, 1).unwrap();
        assert_eq!(mask, vec![false, false]);
        let err = fit_st_step(&batch, &labels, &mask, &model, &strict, 0.1, false, SolverOptions::default()).unwrap_err();
        assert_eq!(err, Error::AllRejected);
        assert!(assign_pseudo_labels(&ModelParams::zeros(n), &batch, &strict, 1).is_err());
    }

    #[test]
    fn squared_step_matches_ridge_on_accepted_subset() {
        use nalgebra::{DMatrix, DVector};
        let mut cfg = small(40, 0.5, 1);
        cfg.loss = LossSpec::squared();
        cfg.loss.pls_threshold = 0.5;
        let labeled = sample_labeled(&cfg.mixture, 8).unwrap();
        let prev = fit_supervised(&labeled, &cfg.loss, 0.2, SolverOptions::default()).unwrap().params;
        let batch = sample_unlabeled_batch(&cfg.mixture, 1, 8).unwrap();
        let (labels, mask) = assign_pseudo_labels(&prev, &batch, &cfg.loss, 1).unwrap();
        assert!(mask.iter().any(|&a| !a) && mask.iter().any(|&a| a));
        let fit = fit_st_step(&batch, &labels, &mask, &prev, &cfg.loss, 0.3, false, SolverOptions::default()).unwrap();

        let rows: Vec<usize> = (0..batch.len()).filter(|&i| mask[i]).collect();
        let n = 40;
        let s = 1.0 / (n as f64).sqrt();
        let a = DMatrix::from_fn(rows.len(), n + 1, |r, c| if c == n { 1.0 } else { batch.features().row(rows[r])[c] * s });
        let mut lhs = a.transpose() * &a;
        for j in 0..n {
            lhs[(j, j)] += 0.3;
        }
        let rhs = a.transpose() * DVector::from_iterator(rows.len(), rows.iter().map(|&i| labels[i]));
        let sol = lhs.lu().solve(&rhs).unwrap();
        for j in 0..n {
            assert!((fit.params.weights[j] - sol[j]).abs() < 1e-8);
        }
        assert!((fit.params.bias - sol[n]).abs() < 1e-8);
    }

    #[test]
    fn tiny_ridge_returns_previous_parameters() {
        let mut cfg = small(64, 0.5, 1);
        cfg.loss = LossSpec::squared();
        let labeled = sample_labeled(&cfg.mixture, 2).unwrap();
        let prev = fit_supervised(&labeled, &cfg.loss, 0.1, SolverOptions::default()).unwrap().params;
        let batch = sample_unlabeled_batch(&cfg.mixture, 1, 2).unwrap();
        let (labels, mask) = assign_pseudo_labels(&prev, &batch, &cfg.loss, 1).unwrap();
        let mut last = f64::INFINITY;
        for lam in [1e-3, 1e-4, 1e-5] {
            let fit = fit_st_step(&batch, &labels, &mask, &prev, &cfg.loss, lam, false, SolverOptions::default()).unwrap();
            let dev = fit
                .params
                .weights
                .iter()
                .zip(&prev.weights)
                .map(|(a, b)| (a - b).abs())
                .fold((fit.params.bias - prev.bias).abs(), f64::max);
            assert!(dev < 50.0 * lam, "lambda {lam}: deviation {dev}");
            assert!(dev < last);
            last = dev;
        }
    }

    #[test]
    fn bias_fixing_keeps_supervised_bias() {
        let mut cfg = small(64, 0.3, 3);
        cfg.bias_fixed = true;
        let tr = run_st(&cfg, 1).unwrap();
        let b0 = tr.steps[0].bias;
        for s in &tr.steps {
            assert_eq!(s.bias, b0);
        }
    }

    #[test]
    fn run_is_deterministic_and_well_formed() {
        let cfg = small(64, 0.4, 3);
        let a = run_st(&cfg, 17).unwrap();
        let b = run_st(&cfg, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 4);
        for s in &a.steps {
            assert!(s.q_bar > 0.0);
            assert!(s.cos_sim.abs() <= 1.0);
            assert!((0.0..=1.0).contains(&s.eps_g));
            assert!((0.0..=1.0).contains(&s.accept_frac));
        }
        let mut zero = cfg;
        zero.mixture.n_batches = 0;
        assert_eq!(run_st(&zero, 17).unwrap().steps.len(), 1);
    }

    #[test]
    fn errors_carry_the_step() {
        let mut cfg = small(32, 0.5, 2);
        cfg.loss.pls_threshold = 1e6;
        let err = run_st(&cfg, 0).unwrap_err();
        assert!(matches!(err, Error::AtStep { t: 1, .. }), "{err:?}");
        assert_eq!(err.root(), &Error::AllRejected);
    }

    #[test]
    fn histograms_and_flags() {
        let mut cfg = small(64, 0.5, 1);
        cfg.loss.pl_link = PlLink::Hard;
        let tr = run_st(&cfg, 3).unwrap();
        let h = empirical_histograms(&tr, 1, 20).unwrap();
        assert!((h.weights.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((h.logits.unwrap().mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(empirical_histograms(&tr, 1, 5).is_err());
        let mut empty = tr.clone();
        empty.steps[1].train_logits.clear();
        assert!(empirical_histograms(&empty, 1, 20).unwrap().logits.is_none());
    }

    #[test]
    fn gen_error_examples() {
        let mix = MixtureConfig::symmetric(4, 0.5, 0.5625, 1.0, 1.0, 1);
        let p = ModelParams {
            weights: vec![1.0, -1.0, 1.0, -1.0],
            bias: 0.0,
        };
        assert_eq!(empirical_gen_error(&p, &mix).unwrap(), 0.5);
        assert!(empirical_gen_error(&ModelParams::zeros(4), &mix).is_err());
    }

    #[test]
    fn shrinkage_with_soft_labels() {
        let cfg = small(256, 0.5, 6);
        let tr = run_st(&cfg, 5).unwrap();
        for w in tr.steps[1..].windows(2) {
            assert!(w[1].q_bar <= w[0].q_bar * 1.02, "{} -> {}", w[0].q_bar, w[1].q_bar);
        }
    }

    #[test]
    fn balanced_bias_is_centred() {
        let cfg = small(1024, 0.5, 0);
        let biases: Vec<f64> = (0..20).map(|s| run_st(&cfg, s).unwrap().steps[0].bias).collect();
        let (m, se) = mean_se(&biases);
        assert!(m.abs() <= 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn q_bar_concentrates_with_size() {
        let spread = |n: usize, seeds: u64| {
            let cfg = small(n, 0.5, 2);
            let v: Vec<f64> = (0..seeds).map(|s| run_st(&cfg, s).unwrap().steps[2].q_bar).collect();
            std_dev(&v)
        };
        assert!(spread(1024, 8) < spread(128, 8));
    }
}
