use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use bayes_reduce::experiments::{results_csv, run_experiment, write_output, ExperimentConfig, ResultRow};
use bayes_reduce::information::{mi_relative_error, signal_to_noise_spectrum, spectral_rank};
use bayes_reduce::reducers::{reduce, OptimizeOptions, ReduceInputs, ReductionMethod};
use bayes_reduce::{Error, GaussianDist, GaussianProblem, LinearGaussianModel, SpdMatrix};

#[derive(Parser)]
#[command(name = "bayes-reduce", version, about = "Optimal observation reduction for linear Gaussian inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid and write its results CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; overrides the config's `output`. Without either, the CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the leading signal-to-noise eigenvalues and the relative MI error curve.
    Eig {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        top: usize,
    },
    /// Compute one reduced basis and write it as CSV, one column per basis vector.
    Reduce {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: ReductionMethod,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        out_basis: PathBuf,
        /// Seed for k-means and optimizer restarts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A linear Gaussian model in JSON; matrices are arrays of rows.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    design: Vec<Vec<f64>>,
    prior_mean: Vec<f64>,
    prior_cov: Vec<Vec<f64>>,
    noise_mean: Vec<f64>,
    noise_cov: Vec<Vec<f64>>,
    /// Realization `y`, needed by the KLD reducer and for the `j0` score.
    #[serde(default)]
    observation: Option<Vec<f64>>,
    /// One row of coordinates per observation, needed by the clustering reducers.
    #[serde(default)]
    locations: Option<Vec<Vec<f64>>>,
}

fn matrix(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>, Error> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("{what}: rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

struct LoadedModel {
    problem: GaussianProblem,
    observation: Option<DVector<f64>>,
    locations: Option<DMatrix<f64>>,
}

fn load_model(path: &Path) -> Result<LoadedModel, Error> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let prior = GaussianDist::new(DVector::from_vec(file.prior_mean), SpdMatrix::new(matrix(&file.prior_cov, "prior_cov")?)?)?;
    let noise = GaussianDist::new(DVector::from_vec(file.noise_mean), SpdMatrix::new(matrix(&file.noise_cov, "noise_cov")?)?)?;
    let model = LinearGaussianModel::new(matrix(&file.design, "design")?, prior, noise)?;
    let locations = file.locations.as_deref().map(|l| matrix(l, "locations")).transpose()?;
    Ok(LoadedModel {
        problem: model.problem()?,
        observation: file.observation.map(DVector::from_vec),
        locations,
    })
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let text = std::fs::read_to_string(config)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed {
        cfg.data_seed = seed;
    }
    let output = run_experiment(&cfg)?;
    match out.or(cfg.output) {
        Some(path) => write_output(&output, &path),
        None => {
            print!("{}", results_csv(&output.rows));
            Ok(())
        }
    }
}

fn eig(model: &Path, top: usize) -> Result<(), Error> {
    let loaded = load_model(model)?;
    let nu = signal_to_noise_spectrum(&loaded.problem)?;
    let m = spectral_rank(&nu);
    println!("r,nu,mi_rel_err");
    for r in 1..=top.min(nu.len()) {
        println!("{r},{},{}", nu[r - 1], mi_relative_error(&nu, r, m)?);
    }
    Ok(())
}

fn basis_csv(basis: &DMatrix<f64>) -> String {
    let header: Vec<String> = (1..=basis.ncols()).map(|j| format!("v{j}")).collect();
    let mut out = header.join(",") + "\n";
    for row in basis.row_iter() {
        let fields: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

fn reduce_cmd(model: &Path, method: ReductionMethod, r: usize, out_basis: &Path, seed: u64) -> Result<(), Error> {
    let loaded = load_model(model)?;
    let inputs = ReduceInputs {
        y: loaded.observation.as_ref(),
        locations: loaded.locations.as_ref(),
        optimize: OptimizeOptions {
            seed,
            ..Default::default()
        },
        seed,
    };
    let report = reduce(&loaded.problem, method, r, &inputs)?;
    std::fs::write(out_basis, basis_csv(report.basis.matrix()))?;
    let s = report.scores;
    let row = ResultRow {
        method,
        r,
        j0: s.j0,
        j1: Some(s.j1),
        mi_rel_err: Some(s.mi_rel_err),
        entropy: Some(s.entropy),
        eps: None,
        eps_h: None,
        seed,
        wall_ms: None,
    };
    print!("{}", results_csv(&[row]));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => run(&config, out, seed),
        Command::Eig { model, top } => eig(&model, top),
        Command::Reduce {
            model,
            method,
            r,
            out_basis,
            seed,
        } => reduce_cmd(&model, method, r, &out_basis, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
