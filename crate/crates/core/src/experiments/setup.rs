//! Experiment configuration and problem generators.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{build_kernel_matrix, chebyshev_design, KernelFamily, KernelSpec};
use crate::error::{Error, Result};
use crate::linalg::{sym_eig, SpdMatrix};
use crate::model::{GaussianDist, LinearGaussianModel};
use crate::nonlinear::LognormalForward;
use crate::reducers::{OptimizeOptions, ReductionMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    /// Chebyshev polynomial regression on `(−1, 1)`.
    Regression1d,
    /// Log-normal field on `(−1, 1)²` with a truncated PCA parameterization.
    Lognormal2d,
    /// Gaussian-bump linear model on `(−1, 1)²` with white noise.
    Clustering,
}

/// Kernel and noise parameters; unset values take the experiment's defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    pub sigma_x: Option<f64>,
    pub sigma_e1: Option<f64>,
    pub ell_e: Option<f64>,
    pub sigma_e2: Option<f64>,
    pub sigma_f1: Option<f64>,
    pub sigma_f2: Option<f64>,
    pub ell_f: Option<f64>,
    /// White-noise standard deviation of the clustering experiment.
    pub noise_std: Option<f64>,
    /// Width of the clustering experiment's Gaussian bumps.
    pub bump_width: Option<f64>,
}

impl KernelParams {
    pub fn sigma_x(&self) -> f64 {
        self.sigma_x.unwrap_or(1.0)
    }

    pub fn sigma_e1(&self, kind: ExperimentKind) -> f64 {
        self.sigma_e1.unwrap_or(match kind {
            ExperimentKind::Lognormal2d => 0.1,
            _ => 0.6,
        })
    }

    pub fn ell_e(&self) -> f64 {
        self.ell_e.unwrap_or(0.05)
    }

    pub fn sigma_e2(&self) -> f64 {
        self.sigma_e2.unwrap_or(1e-3)
    }

    pub fn sigma_f1(&self) -> f64 {
        self.sigma_f1.unwrap_or(0.3)
    }

    pub fn sigma_f2(&self) -> f64 {
        self.sigma_f2.unwrap_or(1e-3)
    }

    pub fn ell_f(&self) -> f64 {
        self.ell_f.unwrap_or(0.2)
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std.unwrap_or(0.5)
    }

    pub fn bump_width(&self) -> f64 {
        self.bump_width.unwrap_or(0.5)
    }
}

fn default_n_mc() -> usize {
    70
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub q: usize,
    pub n: usize,
    #[serde(default)]
    pub kernel: KernelParams,
    pub methods: Vec<ReductionMethod>,
    pub r: Vec<usize>,
    /// Seeds locations and data realizations.
    #[serde(default)]
    pub data_seed: u64,
    /// Seeds k-means and optimizer restarts.
    #[serde(default)]
    pub method_seed: u64,
    /// Data realizations for the MAP error estimators.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub optimizer: OptimizeOptions,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Fill the `wall_ms` column; off by default so output bytes depend only on seeds.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q > self.n {
            return Err(Error::InvalidConfig(format!("need 1 <= q <= n, got q = {}, n = {}", self.q, self.n)));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("method list is empty".into()));
        }
        if self.r.is_empty() {
            return Err(Error::InvalidConfig("r grid is empty".into()));
        }
        if let Some(&r) = self.r.iter().find(|&&r| r == 0 || r > self.n) {
            return Err(Error::InvalidConfig(format!("r = {r} outside [1, {}]", self.n)));
        }
        if self.n_mc == 0 {
            return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
        }
        if self.experiment == ExperimentKind::Lognormal2d && self.methods.contains(&ReductionMethod::Kld) {
            return Err(Error::InvalidConfig(
                "kld needs a single linear-model realization; use it with regression1d or clustering".into(),
            ));
        }
        Ok(())
    }
}

/// ChaCha8 stream `stream` of `seed`; distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const LOCATION_STREAM: u64 = 0;
const FIRST_DATA_STREAM: u64 = 1;

fn check_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.experiment != kind {
        return Err(Error::InvalidConfig(format!(
            "expected a {kind:?} configuration, got {:?}",
            cfg.experiment
        )));
    }
    cfg.validate()
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DMatrix<f64> {
    // Row-major fill so each location consumes consecutive draws.
    let mut m = DMatrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            let mut s: f64 = rng.random_range(-1.0..1.0);
            // Keep strictly inside the open interval.
            while s == -1.0 {
                s = rng.random_range(-1.0..1.0);
            }
            m[(i, j)] = s;
        }
    }
    m
}

/// Linear Gaussian problem with one observed realization.
#[derive(Debug, Clone)]
pub struct LinearSetup {
    pub model: LinearGaussianModel,
    /// `n × d`
    pub locations: DMatrix<f64>,
    pub y: DVector<f64>,
}

fn draw_linear_realization(model: &LinearGaussianModel, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, FIRST_DATA_STREAM);
    let x = model.prior.sample(1, &mut rng).remove(0);
    let e = model.noise.sample(1, &mut rng).remove(0);
    &model.design * x + e
}

/// `(m_X)_i = −1 + 2 (i − 1)/(q − 1)`
pub fn regression_prior_mean(q: usize) -> DVector<f64> {
    if q == 1 {
        return DVector::from_element(1, -1.0);
    }
    DVector::from_fn(q, |i, _| -1.0 + 2.0 * i as f64 / (q - 1) as f64)
}

pub fn setup_regression1d(cfg: &ExperimentConfig) -> Result<LinearSetup> {
    check_kind(cfg, ExperimentKind::Regression1d)?;
    let (n, q) = (cfg.n, cfg.q);
    let k = &cfg.kernel;
    let mut rng = stream_rng(cfg.data_seed, LOCATION_STREAM);
    let locations = uniform_points(&mut rng, n, 1);
    let design = chebyshev_design(locations.as_slice(), q)?;
    let index = DMatrix::from_fn(q, 1, |i, _| i as f64);
    let prior_cov = build_kernel_matrix(&KernelSpec::new(KernelFamily::Matern32Indexed, k.sigma_x(), 1.0, 0.0), &index)?;
    let prior = GaussianDist::new(regression_prior_mean(q), prior_cov)?;
    let noise_spec = KernelSpec::new(
        KernelFamily::Exponential,
        k.sigma_e1(cfg.experiment),
        k.ell_e(),
        k.sigma_e2().powi(2),
    );
    let noise_mean = locations.column(0).map(|s| (4.0 * std::f64::consts::PI * s).cos());
    let noise = GaussianDist::new(noise_mean, build_kernel_matrix(&noise_spec, &locations)?)?;
    let model = LinearGaussianModel::new(design, prior, noise)?;
    let y = draw_linear_realization(&model, cfg.data_seed);
    Ok(LinearSetup { model, locations, y })
}

pub fn setup_clustering(cfg: &ExperimentConfig) -> Result<LinearSetup> {
    check_kind(cfg, ExperimentKind::Clustering)?;
    let (n, q) = (cfg.n, cfg.q);
    let k = &cfg.kernel;
    let mut rng = stream_rng(cfg.data_seed, LOCATION_STREAM);
    let locations = uniform_points(&mut rng, n, 2);
    let width = k.bump_width();
    let centers: Vec<[f64; 2]> = (0..q)
        .map(|j| {
            let a = std::f64::consts::TAU * j as f64 / q as f64;
            [0.5 * a.cos(), 0.5 * a.sin()]
        })
        .collect();
    let design = DMatrix::from_fn(n, q, |i, j| {
        let dx = locations[(i, 0)] - centers[j][0];
        let dy = locations[(i, 1)] - centers[j][1];
        (-(dx * dx + dy * dy) / (2.0 * width * width)).exp()
    });
    let sx = k.sigma_x();
    let prior = GaussianDist::new(DVector::from_element(q, 1.0), SpdMatrix::new(DMatrix::identity(q, q) * (sx * sx))?)?;
    let noise_cov = build_kernel_matrix(&KernelSpec::new(KernelFamily::White, k.noise_std(), 0.0, 0.0), &locations)?;
    let noise = GaussianDist::new(DVector::zeros(n), noise_cov)?;
    let model = LinearGaussianModel::new(design, prior, noise)?;
    let y = draw_linear_realization(&model, cfg.data_seed);
    Ok(LinearSetup { model, locations, y })
}

/// Log-normal problem with several data realizations from the untruncated field.
#[derive(Debug, Clone)]
pub struct LognormalSetup {
    pub forward: LognormalForward,
    /// `N(0, diag(λ₁..λ_q))`
    pub prior: GaussianDist,
    pub noise: GaussianDist,
    /// `n × 2`
    pub locations: DMatrix<f64>,
    /// Leading eigenvalues of `C_F`, descending.
    pub field_eigenvalues: DVector<f64>,
    pub realizations: Vec<DVector<f64>>,
}

pub fn setup_lognormal2d(cfg: &ExperimentConfig) -> Result<LognormalSetup> {
    check_kind(cfg, ExperimentKind::Lognormal2d)?;
    let (n, q) = (cfg.n, cfg.q);
    let k = &cfg.kernel;
    let mut rng = stream_rng(cfg.data_seed, LOCATION_STREAM);
    let locations = uniform_points(&mut rng, n, 2);
    let field_spec = KernelSpec::new(KernelFamily::SquaredExponential, k.sigma_f1(), k.ell_f(), k.sigma_f2().powi(2));
    let field_cov = build_kernel_matrix(&field_spec, &locations)?;
    let eig = sym_eig(field_cov.matrix())?;
    let lambda = eig.values.rows(0, q).into_owned();
    let design = eig.leading_vectors(q);
    let prior = GaussianDist::new(DVector::zeros(q), SpdMatrix::from_diagonal(&lambda)?)?;
    let noise_spec = KernelSpec::new(
        KernelFamily::Exponential,
        k.sigma_e1(cfg.experiment),
        k.ell_e(),
        k.sigma_e2().powi(2),
    );
    let noise = GaussianDist::new(DVector::zeros(n), build_kernel_matrix(&noise_spec, &locations)?)?;
    let field = GaussianDist::new(DVector::zeros(n), field_cov)?;
    let realizations = (0..cfg.n_mc)
        .map(|i| {
            let mut rng = stream_rng(cfg.data_seed, FIRST_DATA_STREAM + i as u64);
            let f = field.sample(1, &mut rng).remove(0);
            let e = noise.sample(1, &mut rng).remove(0);
            f.map(f64::exp) + e
        })
        .collect();
    Ok(LognormalSetup {
        forward: LognormalForward { design },
        prior,
        noise,
        locations,
        field_eigenvalues: lambda,
        realizations,
    })
}
