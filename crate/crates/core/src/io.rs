//! CSV and JSON artifact writers.

use crate::error::{Error, Result};
use crate::hyperopt::HyperEval;
use crate::replica::SaddleTrajectory;
use crate::simulator::StTrace;
use crate::stats::Histogram;
use serde::Serialize;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

#[derive(Serialize)]
struct TrajectoryRow {
    t: usize,
    q: f64,
    chi: f64,
    m: f64,
    #[serde(rename = "R")]
    r: Option<f64>,
    #[serde(rename = "B")]
    bias: f64,
    #[serde(rename = "Qhat")]
    qhat: f64,
    chihat: f64,
    mhat: f64,
    #[serde(rename = "Rhat")]
    rhat: Option<f64>,
    eps_g: f64,
    cos_sim: f64,
    accept_rate: f64,
    iters: usize,
    residual: f64,
    converged: bool,
}

#[derive(Serialize)]
struct TraceRow {
    t: usize,
    q_bar: f64,
    m_bar: f64,
    #[serde(rename = "B")]
    bias: f64,
    cos_sim: f64,
    eps_g: f64,
    accept_frac: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    bin_left: f64,
    bin_right: f64,
    mass: f64,
}

#[derive(Serialize)]
struct OptRow {
    eval: usize,
    lambda_l: f64,
    lambda_u: f64,
    pls_threshold: f64,
    anneal_rate: f64,
    objective: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per step of a replica solution.
pub fn write_trajectory_csv(path: &Path, traj: &SaddleTrajectory) -> Result<()> {
    write_rows(
        path,
        traj.steps.iter().map(|s| TrajectoryRow {
            t: s.t,
            q: s.theta.q,
            chi: s.theta.chi,
            m: s.theta.m,
            r: s.theta.r,
            bias: s.theta.bias,
            qhat: s.hat.qhat,
            chihat: s.hat.chihat,
            mhat: s.hat.mhat,
            rhat: s.hat.rhat,
            eps_g: s.eps_g,
            cos_sim: s.cos_sim,
            accept_rate: s.accept_rate,
            iters: s.iterations,
            residual: s.residual,
            converged: s.converged,
        }),
    )
}

/// One row per step of a finite-size run.
pub fn write_trace_csv(path: &Path, trace: &StTrace) -> Result<()> {
    write_rows(
        path,
        trace.steps.iter().map(|s| TraceRow {
            t: s.t,
            q_bar: s.q_bar,
            m_bar: s.m_bar,
            bias: s.bias,
            cos_sim: s.cos_sim,
            eps_g: s.eps_g,
            accept_frac: s.accept_frac,
        }),
    )
}

pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    write_rows(
        path,
        hist.edges.windows(2).zip(&hist.mass).map(|(e, &mass)| HistogramRow {
            bin_left: e[0],
            bin_right: e[1],
            mass,
        }),
    )
}

pub fn write_opt_trace_csv(path: &Path, trace: &[HyperEval]) -> Result<()> {
    write_rows(
        path,
        trace.iter().map(|e| OptRow {
            eval: e.index,
            lambda_l: e.point.lambda_l,
            lambda_u: e.point.lambda_u,
            pls_threshold: e.point.pls_threshold,
            anneal_rate: e.point.anneal_rate,
            objective: e.objective,
        }),
    )
}

/// Pretty-printed JSON.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value).map_err(|e| Error::Io(e.to_string()))
}
