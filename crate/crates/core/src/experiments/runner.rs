//! Experiment orchestration and CSV output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::setup::{setup_clustering, setup_lognormal2d, setup_regression1d, ExperimentConfig, ExperimentKind, LinearSetup, LognormalSetup};
use crate::error::{Error, Result};
use crate::model::{GaussianProblem, SubspaceBasis};
use crate::nonlinear::{map_errors, map_newton, ForwardModel, LaplaceApprox, LogPosterior};
use crate::reducers::{reduce, ReduceInputs, ReductionMethod, ReductionReport};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "BAYES_REDUCE_THREADS";

pub const RESULTS_HEADER: &str = "method,r,j0,j1,mi_rel_err,entropy,eps,eps_h,seed,wall_ms";
pub const MAP_ERRORS_HEADER: &str = "method,r,eps,eps_h,n_samples,seed";

const MAP_TOL: f64 = 1e-8;
const MAP_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: ReductionMethod,
    pub r: usize,
    pub j0: Option<f64>,
    pub j1: Option<f64>,
    pub mi_rel_err: Option<f64>,
    pub entropy: Option<f64>,
    pub eps: Option<f64>,
    pub eps_h: Option<f64>,
    pub seed: u64,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapErrorRow {
    pub method: ReductionMethod,
    pub r: usize,
    pub eps: f64,
    pub eps_h: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutput {
    /// Sorted by `(method, r)`.
    pub rows: Vec<ResultRow>,
    /// Monte-Carlo MAP error summaries, same order; empty for linear experiments.
    pub map_rows: Vec<MapErrorRow>,
}

/// Thread pool honoring `BAYES_REDUCE_THREADS` (default: available cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))
}

fn grid(cfg: &ExperimentConfig) -> Vec<(ReductionMethod, usize)> {
    let mut g: Vec<(ReductionMethod, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.r.iter().map(move |&r| (m, r)))
        .collect();
    g.sort();
    g.dedup();
    g
}

fn inputs<'a>(cfg: &ExperimentConfig, setup: Option<&'a LinearSetup>, locations: &'a DMatrix<f64>) -> ReduceInputs<'a> {
    let mut optimize = cfg.optimizer;
    optimize.seed = cfg.method_seed;
    ReduceInputs {
        y: setup.map(|s| &s.y),
        locations: Some(locations),
        optimize,
        seed: cfg.method_seed,
    }
}

fn timing(cfg: &ExperimentConfig, report: &ReductionReport) -> Option<u64> {
    cfg.record_timing.then_some(report.wall_ms)
}

/// Runs every `(method, r)` pair of the configuration. Deterministic given the seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let pool = thread_pool()?;
    pool.install(|| match cfg.experiment {
        ExperimentKind::Regression1d => run_linear(cfg, &setup_regression1d(cfg)?),
        ExperimentKind::Clustering => run_linear(cfg, &setup_clustering(cfg)?),
        ExperimentKind::Lognormal2d => run_lognormal(cfg, &setup_lognormal2d(cfg)?),
    })
}

fn run_linear(cfg: &ExperimentConfig, setup: &LinearSetup) -> Result<ExperimentOutput> {
    let problem = setup.model.problem()?;
    let (full_post, _) = problem.posterior_full(&setup.y)?;
    let full = LaplaceApprox::from_gaussian(&full_post)?;
    let rows = grid(cfg)
        .into_par_iter()
        .map(|(method, r)| {
            let report = reduce(&problem, method, r, &inputs(cfg, Some(setup), &setup.locations))?;
            let (post, _) = problem.posterior_reduced(&report.basis, &setup.y)?;
            let errs = map_errors(std::slice::from_ref(&full), &[LaplaceApprox::from_gaussian(&post)?])?;
            Ok(ResultRow {
                method,
                r,
                j0: report.scores.j0,
                j1: Some(report.scores.j1),
                mi_rel_err: Some(report.scores.mi_rel_err),
                entropy: Some(report.scores.entropy),
                eps: Some(errs.eps),
                eps_h: Some(errs.eps_h),
                seed: cfg.data_seed,
                wall_ms: timing(cfg, &report),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutput {
        rows,
        map_rows: Vec::new(),
    })
}

/// Moment-matched Gaussian problem of a log-normal setup.
pub fn lognormal_problem(setup: &LognormalSetup) -> Result<GaussianProblem> {
    GaussianProblem::new(setup.forward.moments(&setup.prior)?, setup.prior.clone(), setup.noise.clone())
}

/// MAP + Laplace for each realization, with the likelihood seen through `basis`.
pub fn laplace_per_realization(setup: &LognormalSetup, basis: Option<&SubspaceBasis>) -> Result<Vec<LaplaceApprox>> {
    setup
        .realizations
        .par_iter()
        .map(|y| {
            let lp = LogPosterior::new(&setup.forward, &setup.prior, &setup.noise, y, basis)?;
            map_newton(&lp, &setup.prior.mean, MAP_TOL, MAP_MAX_ITER)
        })
        .collect()
}

fn run_lognormal(cfg: &ExperimentConfig, setup: &LognormalSetup) -> Result<ExperimentOutput> {
    let problem = lognormal_problem(setup)?;
    let full = laplace_per_realization(setup, None)?;
    let results = grid(cfg)
        .into_par_iter()
        .map(|(method, r)| {
            let report = reduce(&problem, method, r, &inputs(cfg, None, &setup.locations))?;
            let reduced = laplace_per_realization(setup, Some(&report.basis))?;
            let errs = map_errors(&full, &reduced)?;
            let row = ResultRow {
                method,
                r,
                j0: None,
                j1: Some(report.scores.j1),
                mi_rel_err: Some(report.scores.mi_rel_err),
                entropy: Some(report.scores.entropy),
                eps: Some(errs.eps),
                eps_h: Some(errs.eps_h),
                seed: cfg.data_seed,
                wall_ms: timing(cfg, &report),
            };
            let map_row = MapErrorRow {
                method,
                r,
                eps: errs.eps,
                eps_h: errs.eps_h,
                n_samples: errs.n_samples,
                seed: cfg.data_seed,
            };
            Ok((row, map_row))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, map_rows) = results.into_iter().unzip();
    Ok(ExperimentOutput { rows, map_rows })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Finite values in shortest round-trip form; non-finite values as empty fields.
fn num(v: Option<f64>) -> String {
    opt(v.filter(|x| x.is_finite()))
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.r,
            num(r.j0),
            num(r.j1),
            num(r.mi_rel_err),
            num(r.entropy),
            num(r.eps),
            num(r.eps_h),
            r.seed,
            opt(r.wall_ms)
        );
    }
    out
}

pub fn map_errors_csv(rows: &[MapErrorRow]) -> String {
    let mut out = format!("{MAP_ERRORS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.r,
            num(Some(r.eps)),
            num(Some(r.eps_h)),
            r.n_samples,
            r.seed
        );
    }
    out
}

/// Path of the MAP-error file written next to `results`.
pub fn map_errors_path(results: &Path) -> PathBuf {
    let stem = results.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    results.with_file_name(format!("{stem}.map_errors.csv"))
}

/// Writes the results CSV and, when present, the MAP-error CSV beside it.
pub fn write_output(output: &ExperimentOutput, path: &Path) -> Result<()> {
    std::fs::write(path, results_csv(&output.rows))?;
    if !output.map_rows.is_empty() {
        std::fs::write(map_errors_path(path), map_errors_csv(&output.map_rows))?;
    }
    Ok(())
}

/// Rows for one method, ordered by `r`.
pub fn rows_for(output: &ExperimentOutput, method: ReductionMethod) -> Vec<&ResultRow> {
    output.rows.iter().filter(|r| r.method == method).collect()
}
