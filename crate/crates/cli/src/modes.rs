//! Mode dispatch and artifact writing.

use crate::config::{perturbative_config, Mode, RunConfig};
use crate::{Status, PROGRAM};
use anyhow::Context;
use rayon::prelude::*;
use selftrain::analytic::{check_perturbative_claims, closed_form_big_m, closed_form_m_b, compare_continuum, ContinuumState};
use selftrain::compare::compare_theory_experiment;
use selftrain::hyperopt::{optimize_hyperparameters, FAILURE_PENALTY};
use selftrain::io::{write_histogram_csv, write_json, write_opt_trace_csv, write_trace_csv, write_trajectory_csv};
use selftrain::replica::{fixed_point_t0, solve_trajectory};
use selftrain::simulator::{empirical_histograms, run_st, StRunConfig, StTrace};
use selftrain::stats::{mean_se, Histogram};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Failures after validation.
#[derive(Debug)]
enum RunError {
    Numerical(String),
    Io(anyhow::Error),
}

impl From<selftrain::Error> for RunError {
    fn from(e: selftrain::Error) -> Self {
        match e.root() {
            selftrain::Error::Io(_) => RunError::Io(e.into()),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        RunError::Io(e)
    }
}

/// Artifacts written so far, relative to the output directory.
struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn path(&mut self, name: &str) -> Result<PathBuf, RunError> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, v: &T) -> Result<(), RunError> {
        let p = self.path(name)?;
        Ok(write_json(&p, v)?)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'static str,
    version: &'static str,
    mode: Mode,
    seed: u64,
    threads: usize,
    overrides: &'a [String],
    started_unix: u64,
    wall_time_s: f64,
    status: &'static str,
    message: Option<String>,
    artifacts: &'a [String],
    /// Re-running with `--config manifest.json` repeats this run.
    config: &'a RunConfig,
}

pub fn run(cfg: &RunConfig, out_dir: &Path, overrides: &[String]) -> Status {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return Status::Io;
    }
    let mut out = Out {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let result = match cfg.mode {
        Mode::Solve => solve(cfg, &mut out),
        Mode::Simulate => simulate(cfg, &mut out),
        Mode::Compare => compare(cfg, &mut out),
        Mode::Optimize => optimize(cfg, &mut out),
        Mode::Analytic => analytic(cfg, &mut out),
    };
    let (status, message) = match result {
        Ok(()) => (Status::Ok, None),
        Err(RunError::Numerical(m)) => (Status::Numerical, Some(m)),
        Err(RunError::Io(e)) => (Status::Io, Some(format!("{e:#}"))),
    };
    if let Some(m) = &message {
        eprintln!("error: {m}");
    }
    let manifest = Manifest {
        program: PROGRAM,
        version: env!("CARGO_PKG_VERSION"),
        mode: cfg.mode,
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        overrides,
        started_unix,
        wall_time_s: started.elapsed().as_secs_f64(),
        status: match status {
            Status::Ok => "ok",
            Status::Io => "io_error",
            Status::Invalid => "invalid",
            Status::Numerical => "numerical_failure",
        },
        message,
        artifacts: &out.files,
        config: cfg,
    };
    if let Err(e) = write_json(&out.dir.join("manifest.json"), &manifest) {
        eprintln!("error: writing manifest: {e}");
        return Status::Io;
    }
    status
}

fn solve(cfg: &RunConfig, out: &mut Out) -> Result<(), RunError> {
    let traj = solve_trajectory(&cfg.scenario, &cfg.quadrature, &cfg.solver)?;
    write_trajectory_csv(&out.path("trajectory.csv")?, &traj)?;
    out.json("report.json", &traj)?;
    let last = traj.last();
    eprintln!("solve: T = {}, eps_g = {:.6}, max residual {:.2e}", last.t, last.eps_g, traj.max_residual());
    if !traj.converged() {
        let bad: Vec<usize> = traj.steps.iter().filter(|s| !s.converged).map(|s| s.t).collect();
        return Err(RunError::Numerical(format!("fixed point did not converge at steps {bad:?}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct StepSummary {
    t: usize,
    n_seeds: usize,
    q_bar: [f64; 2],
    m_bar: [f64; 2],
    bias: [f64; 2],
    cos_sim: [f64; 2],
    eps_g: [f64; 2],
    accept_frac: [f64; 2],
}

/// Mean and standard error over seeds at every step.
fn summarize(traces: &[&StTrace]) -> Vec<StepSummary> {
    let steps = traces[0].steps.len();
    (0..steps)
        .map(|t| {
            let ms = |f: &dyn Fn(&selftrain::simulator::StStep) -> f64| {
                let v: Vec<f64> = traces.iter().map(|tr| f(&tr.steps[t])).collect();
                let (m, se) = mean_se(&v);
                [m, se]
            };
            StepSummary {
                t,
                n_seeds: traces.len(),
                q_bar: ms(&|s| s.q_bar),
                m_bar: ms(&|s| s.m_bar),
                bias: ms(&|s| s.bias),
                cos_sim: ms(&|s| s.cos_sim),
                eps_g: ms(&|s| s.eps_g),
                accept_frac: ms(&|s| s.accept_frac),
            }
        })
        .collect()
}

fn simulate(cfg: &RunConfig, out: &mut Out) -> Result<(), RunError> {
    let sc = &cfg.scenario;
    let s = &cfg.simulate;
    let run_cfg = StRunConfig {
        mixture: sc.mixture,
        loss: sc.loss,
        lambda_l: sc.lambda_l,
        lambda_u: sc.lambda_u,
        bias_fixed: sc.bias_fixed,
        newton_tol: s.newton_tol,
        newton_max_iter: s.newton_max_iter,
    };
    let seeds: Vec<u64> = (0..s.n_seeds as u64).map(|k| cfg.seed + k).collect();
    let traces: Vec<StTrace> = seeds
        .par_iter()
        .map(|&seed| run_st(&run_cfg, seed).map_err(|e| RunError::Numerical(format!("seed {seed}: {e}"))))
        .collect::<Result<_, _>>()?;
    for (seed, tr) in seeds.iter().zip(&traces) {
        write_trace_csv(&out.path(&format!("traces/trace_seed{seed}.csv"))?, tr)?;
    }
    let hist_steps = s.histogram_steps.clone().unwrap_or_else(|| vec![sc.mixture.n_batches]);
    for &t in &hist_steps {
        let h = empirical_histograms(&traces[0], t, s.histogram_bins)?;
        write_histogram_csv(&out.path(&format!("histograms/weights_t{t}.csv"))?, &h.weights)?;
        if let Some(l) = &h.logits {
            write_histogram_csv(&out.path(&format!("histograms/logits_t{t}.csv"))?, l)?;
        }
    }
    let summary = summarize(&traces.iter().collect::<Vec<_>>());
    let last = summary.last().expect("at least the supervised step");
    eprintln!("simulate: {} seeds, final eps_g = {:.6} ± {:.1e}", seeds.len(), last.eps_g[0], last.eps_g[1]);
    out.json("report.json", &summary)?;
    Ok(())
}

/// Empirical and effective-process histograms on a common range.
fn paired_histograms(empirical: &[f64], theory: &[f64], bins: usize) -> Option<(Histogram, Histogram)> {
    let e = Histogram::from_data(empirical, bins)?;
    let (lo, hi) = (e.edges[0], *e.edges.last().expect("edges"));
    Some((e, Histogram::with_range(theory, lo, hi, bins)))
}

fn compare(cfg: &RunConfig, out: &mut Out) -> Result<(), RunError> {
    let c = compare_theory_experiment(&cfg.scenario, &cfg.quadrature, &cfg.solver, &cfg.compare, cfg.seed)?;
    write_trajectory_csv(&out.path("trajectory.csv")?, &c.theory)?;
    for (n, seed, tr) in &c.traces {
        write_trace_csv(&out.path(&format!("traces/trace_n{n}_seed{seed}.csv"))?, tr)?;
    }
    let ks_row = &c.report.ks[0];
    let (_, _, ks_trace) = c
        .traces
        .iter()
        .find(|(n, _, _)| *n == ks_row.n_dim)
        .expect("the KS cell is among the traces");
    let step = &ks_trace.steps[ks_row.t];
    let bins = 60;
    if let Some((e, t)) = paired_histograms(&step.params.weights, &c.effective_weights, bins) {
        write_histogram_csv(&out.path("histograms/weights_empirical.csv")?, &e)?;
        write_histogram_csv(&out.path("histograms/weights_theory.csv")?, &t)?;
    }
    if let Some((e, t)) = paired_histograms(&step.train_logits, &c.effective_logits, bins) {
        write_histogram_csv(&out.path("histograms/logits_empirical.csv")?, &e)?;
        write_histogram_csv(&out.path("histograms/logits_theory.csv")?, &t)?;
    }
    out.json("report.json", &c.report)?;
    eprintln!(
        "compare: max |z| = {:.2}, KS = {:?}, pass = {}",
        c.report.max_abs_z,
        c.report.ks.iter().map(|k| k.statistic).collect::<Vec<_>>(),
        c.report.pass
    );
    Ok(())
}

fn optimize(cfg: &RunConfig, out: &mut Out) -> Result<(), RunError> {
    let o = &cfg.optimize;
    let res = optimize_hyperparameters(&cfg.scenario, &o.hbox, o.init, &cfg.quadrature, &cfg.solver, &o.nelder_mead)?;
    write_opt_trace_csv(&out.path("opt_trace.csv")?, &res.trace)?;
    #[derive(Serialize)]
    struct Report<'a> {
        best: &'a selftrain::hyperopt::HyperPoint,
        best_value: f64,
        evaluations: usize,
        converged: bool,
    }
    out.json(
        "report.json",
        &Report {
            best: &res.best,
            best_value: res.result.best_value,
            evaluations: res.result.evaluations,
            converged: res.result.converged,
        },
    )?;
    eprintln!("optimize: best eps_g = {:.6} at {:?}", res.result.best_value, res.best);
    if res.result.best_value >= FAILURE_PENALTY {
        return Err(RunError::Numerical("no evaluated point gave a converged trajectory".into()));
    }
    let traj = solve_trajectory(&res.best.apply(&cfg.scenario), &cfg.quadrature, &cfg.solver)?;
    write_trajectory_csv(&out.path("trajectory.csv")?, &traj)?;
    Ok(())
}

#[derive(Serialize)]
struct CurvePoint {
    t_tilde: f64,
    big_m: f64,
    m: f64,
    bias: f64,
}

fn analytic(cfg: &RunConfig, out: &mut Out) -> Result<(), RunError> {
    let sc = &cfg.scenario;
    let a = &cfg.analytic;
    let first = fixed_point_t0(&sc.mixture, &sc.loss, sc.lambda_l, &cfg.quadrature, &cfg.solver)?;
    if !first.converged {
        return Err(RunError::Numerical("supervised fixed point did not converge".into()));
    }
    let state = ContinuumState::from_step(&first, &sc.mixture)?;
    let end = a.horizon * state.tau_big_m;
    let curve = (0..a.samples)
        .map(|k| {
            let t = end * k as f64 / (a.samples - 1) as f64;
            let (m, bias) = closed_form_m_b(&state, t)?;
            Ok(CurvePoint {
                t_tilde: t,
                big_m: closed_form_big_m(&state, t)?,
                m,
                bias,
            })
        })
        .collect::<Result<Vec<_>, selftrain::Error>>()?;
    let continuum = if a.replica {
        Some(compare_continuum(sc, &cfg.quadrature, &cfg.solver)?)
    } else {
        None
    };
    let perturbative = match &a.perturbative {
        Some(p) => Some(check_perturbative_claims(&perturbative_config(sc, p), &cfg.quadrature, &cfg.solver)?),
        None => None,
    };
    #[derive(Serialize)]
    struct Report {
        tau_big_m: f64,
        tau_m: f64,
        state: ContinuumState,
        curve: Vec<CurvePoint>,
        continuum: Option<selftrain::analytic::ContinuumComparison>,
        perturbative: Option<selftrain::analytic::PerturbativeReport>,
    }
    eprintln!("analytic: tau_M = {:.6}, tau_m = {:.6}", state.tau_big_m, state.tau_m);
    out.json(
        "report.json",
        &Report {
            tau_big_m: state.tau_big_m,
            tau_m: state.tau_m,
            state,
            curve,
            continuum,
            perturbative,
        },
    )
}
