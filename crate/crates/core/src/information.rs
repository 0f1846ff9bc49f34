//! Information-theoretic scores of a reduction: Gaussian KL divergence and its
//! log-det / Mahalanobis split, the data-dependent and expected KLD costs,
//! posterior entropy and mutual information.
//!
//! All quantities are in nats.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gen_eig_spd, symmetrize, SpdMatrix};
use crate::model::{GaussianDist, GaussianProblem, SubspaceBasis};

/// Slack allowed below zero for quantities that are nonnegative in exact arithmetic.
pub const NONNEG_SLACK: f64 = 1e-10;

fn clamp_nonneg(v: f64, what: &'static str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFiniteInput(what));
    }
    debug_assert!(v >= -NONNEG_SLACK, "{what} = {v} is negative beyond round-off");
    Ok(v.max(0.0))
}

/// Eigenvalues of `c1⁻¹ c0` through the Cholesky factor of `c1`.
fn relative_eigenvalues(c0: &SpdMatrix, c1: &SpdMatrix) -> Result<DVector<f64>> {
    if c0.dim() != c1.dim() {
        return Err(Error::DimensionMismatch {
            context: "relative_eigenvalues",
            expected: c1.dim(),
            found: c0.dim(),
        });
    }
    let half = c1.solve_lower(c0.matrix());
    let reduced = symmetrize(&c1.solve_lower(&half.transpose()));
    Ok(reduced.symmetric_eigenvalues())
}

/// `trace(c0 c1⁻¹) − log det(c0 c1⁻¹) − q`.
pub fn logdet_divergence(c0: &SpdMatrix, c1: &SpdMatrix) -> Result<f64> {
    let lambdas = relative_eigenvalues(c0, c1)?;
    let mut total = 0.0;
    for &l in lambdas.iter() {
        if !(l > 0.0) {
            return Err(Error::NotPositiveDefinite {
                context: "logdet_divergence",
            });
        }
        // λ − 1 − ln λ without cancellation near λ = 1
        let x = l - 1.0;
        total += x - x.ln_1p();
    }
    clamp_nonneg(total, "logdet_divergence")
}

/// `(m0 − m1)ᵀ c1⁻¹ (m0 − m1)`.
pub fn mahalanobis_divergence(c1: &SpdMatrix, m0: &DVector<f64>, m1: &DVector<f64>) -> Result<f64> {
    if m0.len() != m1.len() {
        return Err(Error::DimensionMismatch {
            context: "mahalanobis_divergence",
            expected: m1.len(),
            found: m0.len(),
        });
    }
    let diff = m0 - m1;
    clamp_nonneg(c1.inv_quad(&diff)?, "mahalanobis_divergence")
}

/// `KL(p0 ‖ p1)` between two Gaussians.
pub fn kl_gaussian(p0: &GaussianDist, p1: &GaussianDist) -> Result<f64> {
    let ldd = logdet_divergence(&p0.cov, &p1.cov)?;
    let md = mahalanobis_divergence(&p1.cov, &p0.mean, &p1.mean)?;
    Ok(0.5 * (ldd + md))
}

/// `KL(P(X | Y = y) ‖ P(X | Vᵀ Y = Vᵀ y))`.
pub fn kld_cost(problem: &GaussianProblem, v: &SubspaceBasis, y: &DVector<f64>) -> Result<f64> {
    let (full, _) = problem.posterior_full(y)?;
    let (reduced, _) = problem.posterior_reduced(v, y)?;
    kl_gaussian(&full, &reduced)
}

/// Closed-form expectation over `Y` of [`kld_cost`].
pub fn ekld_cost(problem: &GaussianProblem, v: &SubspaceBasis) -> Result<f64> {
    let (cov_full, map_full) = problem.full_posterior_map()?;
    let (cov_red, map_red) = problem.reduced_posterior_map(v)?;
    let ldd = logdet_divergence(&cov_full, &cov_red)?;
    // G_π − G_V Vᵀ
    let delta = &map_full.gain - &map_red.gain * v.matrix().transpose();
    let spread = &delta * problem.obs_cov().matrix() * delta.transpose();
    let trace_term = cov_red.inv_trace(&symmetrize(&spread))?;
    let offset_term = mahalanobis_divergence(&cov_red, &map_full.offset, &map_red.offset)?;
    clamp_nonneg(0.5 * (ldd + trace_term + offset_term), "ekld_cost")
}

/// Differential entropy `½ log det C + (d/2) log(2πe)`.
pub fn gaussian_entropy(p: &GaussianDist) -> f64 {
    let d = p.dim() as f64;
    0.5 * p.cov.logdet() + 0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

/// `I(Vᵀ Y, X) = ½ log det((Vᵀ C_Y V)(Vᵀ C_E V)⁻¹)`.
///
/// Evaluated as `½ Σ log(1 + νᵢ)` with `νᵢ` the generalized eigenvalues of
/// `(Vᵀ C_A V, Vᵀ C_E V)`, which is the same quantity since `C_Y = C_A + C_E`.
pub fn mutual_information(problem: &GaussianProblem, v: &SubspaceBasis) -> Result<f64> {
    problem.check_basis(v)?;
    let vm = v.matrix();
    let signal = symmetrize(&(vm.transpose() * &problem.moments.cov_a * vm));
    let noise = SpdMatrix::new(vm.transpose() * problem.noise.cov.matrix() * vm)?;
    let nu = gen_eig_spd(&signal, &noise)?;
    let total: f64 = nu.values.iter().map(|&x| 0.5 * x.max(0.0).ln_1p()).sum();
    clamp_nonneg(total, "mutual_information")
}

/// Generalized spectrum `ν` of `C_A v = ν C_E v`, descending, clamped at zero.
pub fn signal_to_noise_spectrum(problem: &GaussianProblem) -> Result<DVector<f64>> {
    let eig = gen_eig_spd(&problem.moments.cov_a, &problem.noise.cov)?;
    Ok(eig.values.map(|v| v.max(0.0)))
}

/// `I(Y, X) = ½ Σ log(1 + νᵢ)` over the full spectrum.
pub fn full_mutual_information(problem: &GaussianProblem) -> Result<f64> {
    let nu = signal_to_noise_spectrum(problem)?;
    Ok(nu.iter().map(|&x| 0.5 * x.ln_1p()).sum())
}

/// Entropy of the reduced posterior; independent of the realization `y`.
pub fn posterior_entropy(problem: &GaussianProblem, v: &SubspaceBasis) -> Result<f64> {
    let (cov, _) = problem.reduced_posterior_map(v)?;
    Ok(gaussian_entropy(&GaussianDist::new(
        DVector::zeros(cov.dim()),
        cov,
    )?))
}

/// Number of spectrum entries above the zero clamp.
pub fn spectral_rank(nu: &DVector<f64>) -> usize {
    nu.iter().filter(|&&v| v > 0.0).count()
}

/// A priori relative MI error of the leading-`r` generalized eigenvectors:
/// `1 − Σ_{i≤min(r,m)} log(1+νᵢ) / Σ_{i≤m} log(1+νᵢ)`.
pub fn mi_relative_error(nu: &DVector<f64>, r: usize, m: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::InvalidArgument("r must be at least 1".into()));
    }
    if m > nu.len() {
        return Err(Error::DimensionMismatch {
            context: "mi_relative_error rank",
            expected: nu.len(),
            found: m,
        });
    }
    if nu.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("spectrum must be finite and nonnegative".into()));
    }
    if nu.as_slice().windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument("spectrum must be sorted descending".into()));
    }
    let total: f64 = nu.iter().take(m).map(|v| v.ln_1p()).sum();
    if m == 0 || total <= 0.0 {
        return Err(Error::EmptySpectrum);
    }
    if r >= m {
        return Ok(0.0);
    }
    let kept: f64 = nu.iter().take(r).map(|v| v.ln_1p()).sum();
    Ok((1.0 - kept / total).clamp(0.0, 1.0))
}

/// Diagnostic scores of one reduced basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoScores {
    /// KLD to the full posterior for the scored realization, when one was supplied.
    pub j0: Option<f64>,
    pub j1: f64,
    pub mi: f64,
    pub entropy: f64,
    pub mi_rel_err: f64,
}

impl InfoScores {
    pub fn evaluate(problem: &GaussianProblem, v: &SubspaceBasis, y: Option<&DVector<f64>>) -> Result<Self> {
        let j0 = y.map(|y| kld_cost(problem, v, y)).transpose()?;
        let j1 = ekld_cost(problem, v)?;
        let mi = mutual_information(problem, v)?;
        let entropy = posterior_entropy(problem, v)?;
        let total = full_mutual_information(problem)?;
        let mi_rel_err = if total > 0.0 {
            ((total - mi) / total).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Ok(Self {
            j0,
            j1,
            mi,
            entropy,
            mi_rel_err,
        })
    }
}

/// Shared per-problem quantities for the optimizable costs.
#[derive(Debug, Clone)]
struct CostCache {
    /// `C_Y⁻¹ C_AX`, i.e. `G_πᵀ`
    full_gain_t: DMatrix<f64>,
    full_cov: SpdMatrix,
    full_offset: DVector<f64>,
}

impl CostCache {
    fn new(problem: &GaussianProblem) -> Result<Self> {
        let (full_cov, map) = problem.full_posterior_map()?;
        Ok(Self {
            full_gain_t: map.gain.transpose(),
            full_cov,
            full_offset: map.offset,
        })
    }
}

/// Reduced-posterior pieces at an arbitrary (not necessarily orthonormal) `V`.
struct ReducedPieces {
    /// `C_Y V`
    cy_v: DMatrix<f64>,
    /// `Vᵀ C_Y V`
    s: SpdMatrix,
    /// `(Vᵀ C_Y V)⁻¹ Vᵀ C_AX`
    pk: DMatrix<f64>,
    /// `C_AX − C_Y V (Vᵀ C_Y V)⁻¹ Vᵀ C_AX`; satisfies `Vᵀ R = 0`
    resid: DMatrix<f64>,
    cov: SpdMatrix,
}

impl ReducedPieces {
    fn new(problem: &GaussianProblem, v: &DMatrix<f64>) -> Result<Self> {
        if v.nrows() != problem.n_obs() {
            return Err(Error::DimensionMismatch {
                context: "cost basis rows",
                expected: problem.n_obs(),
                found: v.nrows(),
            });
        }
        let cax = &problem.moments.cross_ax;
        let cy_v = problem.obs_cov().matrix() * v;
        let s = SpdMatrix::new(symmetrize(&(v.transpose() * &cy_v)))?;
        let k = v.transpose() * cax;
        let pk = s.solve(&k)?;
        let resid = cax - &cy_v * &pk;
        let cov = SpdMatrix::new(symmetrize(&(problem.prior.cov.matrix() - k.transpose() * &pk)))?;
        Ok(Self {
            cy_v,
            s,
            pk,
            resid,
            cov,
        })
    }

    /// Euclidean gradient shared by both KLD costs.
    ///
    /// `gamma` is `∂J/∂C_V` and `q` is `E[e gᵀ]` where `g = ∂J/∂m_V` and
    /// `m_V = m_X + (PK)ᵀ Vᵀ e`.
    fn gradient(&self, v: &DMatrix<f64>, gamma: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let pkt = self.pk.transpose();
        let cov_path = &self.resid * gamma * &pkt * (-2.0);
        // P Vᵀ Q  (r × q)
        let pvq = self.s.solve(&(v.transpose() * q))?;
        let mean_path_a = &self.resid * pvq.transpose();
        let mean_path_b = (q - &self.cy_v * &pvq) * &pkt;
        Ok(cov_path + mean_path_a + mean_path_b)
    }
}

/// `J₀` as a function of the basis matrix, with its analytic Euclidean gradient.
#[derive(Debug, Clone)]
pub struct KldObjective {
    problem: GaussianProblem,
    cache: CostCache,
    full_mean: DVector<f64>,
    /// `y − m_E − C_AX C_X⁻¹ m_X`
    centered_data: DVector<f64>,
}

impl KldObjective {
    pub fn new(problem: &GaussianProblem, y: &DVector<f64>) -> Result<Self> {
        problem.check_data(y)?;
        let cache = CostCache::new(problem)?;
        let full_mean = cache.full_gain_t.transpose() * (y - problem.obs_mean()) + &cache.full_offset;
        let centered_data =
            y - &problem.noise.mean - &problem.moments.cross_ax * problem.prior_natural_mean();
        Ok(Self {
            problem: problem.clone(),
            cache,
            full_mean,
            centered_data,
        })
    }

    fn reduced_mean(&self, v: &DMatrix<f64>, pieces: &ReducedPieces) -> DVector<f64> {
        &self.problem.prior.mean + pieces.pk.transpose() * (v.transpose() * &self.centered_data)
    }

    pub fn value(&self, v: &DMatrix<f64>) -> Result<f64> {
        let pieces = ReducedPieces::new(&self.problem, v)?;
        let delta = &self.full_mean - self.reduced_mean(v, &pieces);
        let ldd = logdet_divergence(&self.cache.full_cov, &pieces.cov)?;
        let md = pieces.cov.inv_quad(&delta)?;
        Ok(0.5 * (ldd + md))
    }

    pub fn gradient(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let pieces = ReducedPieces::new(&self.problem, v)?;
        let delta = &self.full_mean - self.reduced_mean(v, &pieces);
        let cinv_delta = pieces.cov.solve_vec(&delta)?;
        let spread = self.cache.full_cov.matrix() + &delta * delta.transpose();
        let gamma = cov_sensitivity(&pieces.cov, &spread)?;
        let q = -(&self.centered_data * cinv_delta.transpose());
        pieces.gradient(v, &gamma, &q)
    }
}

/// `J₁` as a function of the basis matrix, with its analytic Euclidean gradient.
#[derive(Debug, Clone)]
pub struct EkldObjective {
    problem: GaussianProblem,
    cache: CostCache,
    /// `m_A − C_AX C_X⁻¹ m_X`
    centered_signal: DVector<f64>,
}

impl EkldObjective {
    pub fn new(problem: &GaussianProblem) -> Result<Self> {
        let cache = CostCache::new(problem)?;
        let centered_signal = &problem.moments.mean_a - &problem.moments.cross_ax * problem.prior_natural_mean();
        Ok(Self {
            problem: problem.clone(),
            cache,
            centered_signal,
        })
    }

    /// `E[δ δᵀ]` and `h_π − h_V`, with `δ = m_π − m_V`.
    fn mean_spread(&self, v: &DMatrix<f64>, pieces: &ReducedPieces) -> (DMatrix<f64>, DVector<f64>) {
        let offset_red =
            &self.problem.prior.mean + pieces.pk.transpose() * (v.transpose() * &self.centered_signal);
        let offset_gap = &self.cache.full_offset - offset_red;
        // Δ C_Y Δᵀ reduces to G_π R because Vᵀ R = 0.
        let fluct = symmetrize(&(self.cache.full_gain_t.transpose() * &pieces.resid));
        (fluct + &offset_gap * offset_gap.transpose(), offset_gap)
    }

    pub fn value(&self, v: &DMatrix<f64>) -> Result<f64> {
        let pieces = ReducedPieces::new(&self.problem, v)?;
        let (spread, _) = self.mean_spread(v, &pieces);
        let ldd = logdet_divergence(&self.cache.full_cov, &pieces.cov)?;
        let tr = pieces.cov.inv_trace(&spread)?;
        Ok(0.5 * (ldd + tr))
    }

    pub fn gradient(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let pieces = ReducedPieces::new(&self.problem, v)?;
        let (spread, offset_gap) = self.mean_spread(v, &pieces);
        let gamma = cov_sensitivity(&pieces.cov, &(self.cache.full_cov.matrix() + spread))?;
        // E[e δᵀ] = ē (h_π − h_V)ᵀ + C_Y Δᵀ, and C_Y Δᵀ = R.
        let cross = &self.centered_signal * offset_gap.transpose() + &pieces.resid;
        let q = -pieces.cov.solve(&cross.transpose())?.transpose();
        pieces.gradient(v, &gamma, &q)
    }
}

/// `½ [C⁻¹ − C⁻¹ M C⁻¹]`
fn cov_sensitivity(cov: &SpdMatrix, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cinv_m = cov.solve(m)?;
    let cinv_m_cinv = cov.solve(&cinv_m.transpose())?;
    let q = cov.dim();
    let cinv = cov.solve(&DMatrix::identity(q, q))?;
    Ok(symmetrize(&(cinv - cinv_m_cinv)) * 0.5)
}

/// Negated mutual information `−I(Vᵀ Y, X)` with its analytic gradient.
#[derive(Debug, Clone)]
pub struct NegMiObjective {
    problem: GaussianProblem,
}

impl NegMiObjective {
    pub fn new(problem: &GaussianProblem) -> Self {
        Self {
            problem: problem.clone(),
        }
    }

    pub fn value(&self, v: &DMatrix<f64>) -> Result<f64> {
        let cy = SpdMatrix::new(v.transpose() * self.problem.obs_cov().matrix() * v)?;
        let ce = SpdMatrix::new(v.transpose() * self.problem.noise.cov.matrix() * v)?;
        Ok(-0.5 * (cy.logdet() - ce.logdet()))
    }

    pub fn gradient(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cy_v = self.problem.obs_cov().matrix() * v;
        let ce_v = self.problem.noise.cov.matrix() * v;
        let sy = SpdMatrix::new(v.transpose() * &cy_v)?;
        let se = SpdMatrix::new(v.transpose() * &ce_v)?;
        let gy = sy.solve(&cy_v.transpose())?.transpose();
        let ge = se.solve(&ce_v.transpose())?.transpose();
        Ok(ge - gy)
    }
}
