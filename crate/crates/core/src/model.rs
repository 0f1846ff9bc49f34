//! Linear Gaussian observation model `Y = B X + E`, its moment triple and the
//! exact full and reduced posteriors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{column_rank, orthonormalize, symmetrize, SpdMatrix, RANK_TOL};

/// Multivariate normal distribution.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                context: "GaussianDist",
                expected: cov.dim(),
                found: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("GaussianDist mean"));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: SpdMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `count` draws `mean + L z` with `z` standard normal from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        let l = self.cov.factor();
        let d = self.dim();
        (0..count)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.mean + &l * z
            })
            .collect()
    }
}

/// `Y = B X + E` with independent Gaussian `X` and `E`.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub design: DMatrix<f64>,
    pub prior: GaussianDist,
    pub noise: GaussianDist,
}

impl LinearGaussianModel {
    pub fn new(design: DMatrix<f64>, prior: GaussianDist, noise: GaussianDist) -> Result<Self> {
        if design.nrows() != noise.dim() {
            return Err(Error::DimensionMismatch {
                context: "design rows vs noise",
                expected: noise.dim(),
                found: design.nrows(),
            });
        }
        if design.ncols() != prior.dim() {
            return Err(Error::DimensionMismatch {
                context: "design columns vs prior",
                expected: prior.dim(),
                found: design.ncols(),
            });
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("design"));
        }
        Ok(Self {
            design,
            prior,
            noise,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.design.ncols()
    }

    /// Moments plus prior and noise, ready for scoring and reduction.
    pub fn problem(&self) -> Result<GaussianProblem> {
        GaussianProblem::new(moments_linear(self)?, self.prior.clone(), self.noise.clone())
    }
}

/// Mean of `A(X)`, covariance of `A(X)` and cross-covariance between `A(X)` and `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMoments {
    pub mean_a: DVector<f64>,
    pub cov_a: DMatrix<f64>,
    pub cross_ax: DMatrix<f64>,
}

impl ModelMoments {
    pub fn n_obs(&self) -> usize {
        self.mean_a.len()
    }

    pub fn n_params(&self) -> usize {
        self.cross_ax.ncols()
    }
}

/// `m_A = B m_X`, `C_A = B C_X Bᵀ`, `C_AX = B C_X`.
pub fn moments_linear(model: &LinearGaussianModel) -> Result<ModelMoments> {
    let b = &model.design;
    if b.ncols() != model.prior.dim() {
        return Err(Error::DimensionMismatch {
            context: "moments_linear",
            expected: model.prior.dim(),
            found: b.ncols(),
        });
    }
    let cross_ax = b * model.prior.cov.matrix();
    let cov_a = symmetrize(&(&cross_ax * b.transpose()));
    Ok(ModelMoments {
        mean_a: b * &model.prior.mean,
        cov_a,
        cross_ax,
    })
}

/// Distribution of `Y = A(X) + E` implied by the moments.
pub fn observation_moments(mm: &ModelMoments, noise: &GaussianDist) -> Result<GaussianDist> {
    if mm.n_obs() != noise.dim() || mm.cov_a.nrows() != noise.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation_moments",
            expected: noise.dim(),
            found: mm.n_obs(),
        });
    }
    let cov = SpdMatrix::new(&mm.cov_a + noise.cov.matrix())?;
    GaussianDist::new(&mm.mean_a + &noise.mean, cov)
}

/// Full-column-rank `n × r` matrix representing a subspace of observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    matrix: DMatrix<f64>,
    orthonormal: bool,
}

impl SubspaceBasis {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (n, r) = matrix.shape();
        if r == 0 || r > n {
            return Err(Error::InvalidArgument(format!(
                "basis must have 1 <= r <= n columns, got {r} for n = {n}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("SubspaceBasis"));
        }
        let rank = column_rank(&matrix, RANK_TOL);
        if rank < r {
            return Err(Error::RankDeficientBasis { rank, cols: r });
        }
        let gram = matrix.transpose() * &matrix;
        let orthonormal = (gram - DMatrix::identity(r, r)).amax() <= 1e-10;
        Ok(Self {
            matrix,
            orthonormal,
        })
    }

    /// Orthonormal representative of the same subspace.
    pub fn orthonormalized(matrix: &DMatrix<f64>) -> Result<Self> {
        let q = orthonormalize(matrix).map_err(|_| Error::RankDeficientBasis {
            rank: column_rank(matrix, RANK_TOL),
            cols: matrix.ncols(),
        })?;
        Self::new(q)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            orthonormal: true,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub fn n_obs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }
}

/// `x ↦ G x + h`, the affine map from (centered, projected) data to the posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePosteriorMap {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

/// Moment triple, prior and noise, with `C_Y` factored once.
#[derive(Debug, Clone)]
pub struct GaussianProblem {
    pub moments: ModelMoments,
    pub prior: GaussianDist,
    pub noise: GaussianDist,
    obs_cov: SpdMatrix,
    /// `C_X⁻¹ m_X`
    prior_natural_mean: DVector<f64>,
}

impl GaussianProblem {
    pub fn new(moments: ModelMoments, prior: GaussianDist, noise: GaussianDist) -> Result<Self> {
        let n = noise.dim();
        let q = prior.dim();
        if moments.n_obs() != n || moments.cov_a.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "moments vs noise",
                expected: n,
                found: moments.n_obs(),
            });
        }
        if moments.cross_ax.shape() != (n, q) {
            return Err(Error::DimensionMismatch {
                context: "cross covariance vs prior",
                expected: q,
                found: moments.cross_ax.ncols(),
            });
        }
        let obs_cov = SpdMatrix::new(&moments.cov_a + noise.cov.matrix())?;
        let prior_natural_mean = prior.cov.solve_vec(&prior.mean)?;
        Ok(Self {
            moments,
            prior,
            noise,
            obs_cov,
            prior_natural_mean,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.noise.dim()
    }

    pub fn n_params(&self) -> usize {
        self.prior.dim()
    }

    /// `C_Y = C_A + C_E`.
    pub fn obs_cov(&self) -> &SpdMatrix {
        &self.obs_cov
    }

    /// `m_Y = m_A + m_E`.
    pub fn obs_mean(&self) -> DVector<f64> {
        &self.moments.mean_a + &self.noise.mean
    }

    pub(crate) fn prior_natural_mean(&self) -> &DVector<f64> {
        &self.prior_natural_mean
    }

    pub(crate) fn check_data(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.n_obs() {
            return Err(Error::DimensionMismatch {
                context: "observation vector",
                expected: self.n_obs(),
                found: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("observation vector"));
        }
        Ok(())
    }

    pub(crate) fn check_basis(&self, v: &SubspaceBasis) -> Result<()> {
        if v.n_obs() != self.n_obs() {
            return Err(Error::DimensionMismatch {
                context: "basis rows",
                expected: self.n_obs(),
                found: v.n_obs(),
            });
        }
        Ok(())
    }

    /// Posterior covariance and affine mean map for the full data.
    pub fn full_posterior_map(&self) -> Result<(SpdMatrix, AffinePosteriorMap)> {
        let cax = &self.moments.cross_ax;
        // C_Y⁻¹ C_AX, so G_π = (C_Y⁻¹ C_AX)ᵀ
        let gain_t = self.obs_cov.solve(cax)?;
        let cov = SpdMatrix::new(symmetrize(
            &(self.prior.cov.matrix() - cax.transpose() * &gain_t),
        ))?;
        let gain = gain_t.transpose();
        let offset = cov.matrix() * &self.prior_natural_mean + &gain * &self.moments.mean_a;
        Ok((cov, AffinePosteriorMap { gain, offset }))
    }

    /// Posterior covariance and affine mean map for the reduced data `Vᵀ y`.
    pub fn reduced_posterior_map(&self, v: &SubspaceBasis) -> Result<(SpdMatrix, AffinePosteriorMap)> {
        self.check_basis(v)?;
        let vm = v.matrix();
        let cax = &self.moments.cross_ax;
        let s = SpdMatrix::new(vm.transpose() * self.obs_cov.matrix() * vm)?;
        let k = vm.transpose() * cax;
        let pk = s.solve(&k)?;
        let cov = SpdMatrix::new(symmetrize(&(self.prior.cov.matrix() - k.transpose() * &pk)))?;
        let gain = pk.transpose();
        let offset =
            cov.matrix() * &self.prior_natural_mean + &gain * (vm.transpose() * &self.moments.mean_a);
        Ok((cov, AffinePosteriorMap { gain, offset }))
    }

    pub fn posterior_full(&self, y: &DVector<f64>) -> Result<(GaussianDist, AffinePosteriorMap)> {
        self.check_data(y)?;
        let (cov, map) = self.full_posterior_map()?;
        let mean = &map.gain * (y - self.obs_mean()) + &map.offset;
        Ok((GaussianDist::new(mean, cov)?, map))
    }

    pub fn posterior_reduced(
        &self,
        v: &SubspaceBasis,
        y: &DVector<f64>,
    ) -> Result<(GaussianDist, AffinePosteriorMap)> {
        self.check_data(y)?;
        let (cov, map) = self.reduced_posterior_map(v)?;
        let mean = &map.gain * (v.matrix().transpose() * (y - self.obs_mean())) + &map.offset;
        Ok((GaussianDist::new(mean, cov)?, map))
    }
}

/// Exact posterior `P(X | Y = y)`.
pub fn posterior_full(
    mm: &ModelMoments,
    prior: &GaussianDist,
    noise: &GaussianDist,
    y: &DVector<f64>,
) -> Result<(GaussianDist, AffinePosteriorMap)> {
    GaussianProblem::new(mm.clone(), prior.clone(), noise.clone())?.posterior_full(y)
}

/// Exact posterior `P(X | Vᵀ Y = Vᵀ y)`.
pub fn posterior_reduced(
    mm: &ModelMoments,
    prior: &GaussianDist,
    noise: &GaussianDist,
    v: &SubspaceBasis,
    y: &DVector<f64>,
) -> Result<(GaussianDist, AffinePosteriorMap)> {
    GaussianProblem::new(mm.clone(), prior.clone(), noise.clone())?.posterior_reduced(v, y)
}
