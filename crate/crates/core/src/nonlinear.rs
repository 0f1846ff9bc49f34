//! Nonlinear forward models, MAP estimation and Laplace approximations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::truncated_cg;
use crate::linalg::{sym_eig, symmetrize, SpdMatrix};
use crate::model::{GaussianDist, ModelMoments, SubspaceBasis};

/// Overflow guard on `D_ii = (B C_X Bᵀ)_ii` for the log-normal moments.
pub const MOMENT_EXPONENT_LIMIT: f64 = 700.0;

/// Relative eigenvalue floor applied when a MAP Hessian needs SPD projection.
const SPD_FLOOR_REL: f64 = 1e-12;

const MAX_CONSECUTIVE_REJECTIONS: usize = 25;

/// A differentiable map `x ↦ A(x)` from parameters to noiseless observations.
pub trait ForwardModel: Sync {
    fn n_obs(&self) -> usize;

    fn n_params(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `n × q`
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `Σᵢ wᵢ ∇²Aᵢ(x)`, or `None` when only Gauss–Newton curvature is available.
    fn weighted_hessian(&self, _x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Moment triple of `A(X)` under `prior`.
    fn moments(&self, prior: &GaussianDist) -> Result<ModelMoments>;
}

/// `A(x) = B x`.
#[derive(Debug, Clone)]
pub struct LinearForward {
    pub design: DMatrix<f64>,
}

impl ForwardModel for LinearForward {
    fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    fn n_params(&self) -> usize {
        self.design.ncols()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.design * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.design.clone()
    }

    fn weighted_hessian(&self, _x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let q = self.n_params();
        Some(DMatrix::zeros(q, q))
    }

    fn moments(&self, prior: &GaussianDist) -> Result<ModelMoments> {
        check_prior(self.n_params(), prior)?;
        let cross_ax = &self.design * prior.cov.matrix();
        let cov_a = symmetrize(&(&cross_ax * self.design.transpose()));
        Ok(ModelMoments {
            mean_a: &self.design * &prior.mean,
            cov_a,
            cross_ax,
        })
    }
}

/// `Aᵢ(x) = exp((B x)ᵢ)`.
#[derive(Debug, Clone)]
pub struct LognormalForward {
    pub design: DMatrix<f64>,
}

impl ForwardModel for LognormalForward {
    fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    fn n_params(&self) -> usize {
        self.design.ncols()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.design * x).map(f64::exp)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let a = self.eval(x);
        let mut j = self.design.clone();
        for (mut row, ai) in j.row_iter_mut().zip(a.iter()) {
            row *= *ai;
        }
        j
    }

    /// `Bᵀ diag(w ∘ A(x)) B`
    fn weighted_hessian(&self, x: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let scale = self.eval(x).component_mul(w);
        let mut weighted = self.design.clone();
        for (mut row, s) in weighted.row_iter_mut().zip(scale.iter()) {
            row *= *s;
        }
        Some(symmetrize(&(self.design.transpose() * weighted)))
    }

    fn moments(&self, prior: &GaussianDist) -> Result<ModelMoments> {
        check_prior(self.n_params(), prior)?;
        lognormal_moments_shifted(&self.design, &prior.mean, &prior.cov)
    }
}

fn check_prior(q: usize, prior: &GaussianDist) -> Result<()> {
    if prior.dim() != q {
        return Err(Error::DimensionMismatch {
            context: "forward model vs prior",
            expected: q,
            found: prior.dim(),
        });
    }
    Ok(())
}

/// Moments of `exp(B X)` for `X ~ N(0, C_X)`.
pub fn lognormal_moments(design: &DMatrix<f64>, prior_cov: &SpdMatrix) -> Result<ModelMoments> {
    lognormal_moments_shifted(design, &DVector::zeros(design.ncols()), prior_cov)
}

/// Moments of `exp(B X)` for `X ~ N(m_X, C_X)`; reduces to the centered formulas
/// when `m_X = 0`.
fn lognormal_moments_shifted(design: &DMatrix<f64>, mean: &DVector<f64>, cov: &SpdMatrix) -> Result<ModelMoments> {
    if design.ncols() != cov.dim() {
        return Err(Error::DimensionMismatch {
            context: "lognormal_moments",
            expected: cov.dim(),
            found: design.ncols(),
        });
    }
    let bc = design * cov.matrix();
    let d = symmetrize(&(&bc * design.transpose()));
    let max_diag = d.diagonal().max();
    if max_diag > MOMENT_EXPONENT_LIMIT {
        return Err(Error::MomentOverflow(max_diag));
    }
    let mu = design * mean;
    let n = design.nrows();
    let mean_a = DVector::from_fn(n, |i, _| (mu[i] + 0.5 * d[(i, i)]).exp());
    let cov_a = DMatrix::from_fn(n, n, |i, j| mean_a[i] * mean_a[j] * d[(i, j)].exp_m1());
    let mut cross_ax = bc;
    for (mut row, m) in cross_ax.row_iter_mut().zip(mean_a.iter()) {
        row *= *m;
    }
    Ok(ModelMoments {
        mean_a,
        cov_a: symmetrize(&cov_a),
        cross_ax,
    })
}

/// Value, gradient and Hessian of the log-posterior (up to a constant).
#[derive(Debug, Clone)]
pub struct LogPostEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `log f(y | x) + log f(x)` for `Y = A(X) + E`, optionally observed through `W = Vᵀ Y`.
pub struct LogPosterior<'a, F: ForwardModel + ?Sized> {
    forward: &'a F,
    prior: &'a GaussianDist,
    /// `Vᵀ`, absent for the full likelihood.
    projection: Option<DMatrix<f64>>,
    /// `P C_E Pᵀ`
    noise_cov: SpdMatrix,
    /// `P (y − m_E)`
    data: DVector<f64>,
}

impl<'a, F: ForwardModel + ?Sized> LogPosterior<'a, F> {
    pub fn new(
        forward: &'a F,
        prior: &'a GaussianDist,
        noise: &GaussianDist,
        y: &DVector<f64>,
        basis: Option<&SubspaceBasis>,
    ) -> Result<Self> {
        let n = forward.n_obs();
        if prior.dim() != forward.n_params() {
            return Err(Error::DimensionMismatch {
                context: "log_posterior prior",
                expected: forward.n_params(),
                found: prior.dim(),
            });
        }
        if noise.dim() != n || y.len() != n {
            return Err(Error::DimensionMismatch {
                context: "log_posterior observations",
                expected: n,
                found: if noise.dim() != n { noise.dim() } else { y.len() },
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("observation"));
        }
        let centered = y - &noise.mean;
        let (projection, noise_cov, data) = match basis {
            None => (None, noise.cov.clone(), centered),
            Some(v) => {
                if v.n_obs() != n {
                    return Err(Error::DimensionMismatch {
                        context: "log_posterior basis",
                        expected: n,
                        found: v.n_obs(),
                    });
                }
                let p = v.matrix().transpose();
                let cov = SpdMatrix::new(&p * noise.cov.matrix() * v.matrix())?;
                let data = &p * centered;
                (Some(p), cov, data)
            }
        };
        Ok(Self {
            forward,
            prior,
            projection,
            noise_cov,
            data,
        })
    }

    pub fn n_params(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &GaussianDist {
        self.prior
    }

    /// Whether the Hessian includes the forward model's second-order term.
    pub fn exact_curvature(&self) -> bool {
        let q = self.n_params();
        self.forward
            .weighted_hessian(&DVector::zeros(q), &DVector::zeros(self.forward.n_obs()))
            .is_some()
    }

    fn project_vec(&self, v: DVector<f64>) -> DVector<f64> {
        match &self.projection {
            Some(p) => p * v,
            None => v,
        }
    }

    fn project_mat(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        match &self.projection {
            Some(p) => p * m,
            None => m,
        }
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.data - self.project_vec(self.forward.eval(x))
    }

    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(x);
        let dx = x - &self.prior.mean;
        Ok(-0.5 * self.noise_cov.inv_quad(&r)? - 0.5 * self.prior.cov.inv_quad(&dx)?)
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<LogPostEval> {
        if x.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "log_posterior point",
                expected: self.n_params(),
                found: x.len(),
            });
        }
        let r = self.residual(x);
        let dx = x - &self.prior.mean;
        let sr = self.noise_cov.solve_vec(&r)?;
        let prior_dx = self.prior.cov.solve_vec(&dx)?;
        let value = -0.5 * r.dot(&sr) - 0.5 * dx.dot(&prior_dx);

        let pj = self.project_mat(self.forward.jacobian(x));
        let gradient = pj.transpose() * &sr - &prior_dx;

        let s_pj = self.noise_cov.solve(&pj)?;
        let mut hessian = -(pj.transpose() * s_pj) - self.prior.cov.inverse();
        let w = match &self.projection {
            Some(p) => p.transpose() * &sr,
            None => sr,
        };
        if let Some(curv) = self.forward.weighted_hessian(x, &w) {
            hessian += curv;
        }
        Ok(LogPostEval {
            value,
            gradient,
            hessian: symmetrize(&hessian),
        })
    }
}

/// One-shot evaluation of the log-posterior at `x`.
pub fn log_posterior<F: ForwardModel + ?Sized>(
    forward: &F,
    prior: &GaussianDist,
    noise: &GaussianDist,
    y: &DVector<f64>,
    basis: Option<&SubspaceBasis>,
    x: &DVector<f64>,
) -> Result<LogPostEval> {
    LogPosterior::new(forward, prior, noise, y, basis)?.evaluate(x)
}

/// Gaussian approximation at the MAP point.
#[derive(Debug, Clone)]
pub struct LaplaceApprox {
    pub x_map: DVector<f64>,
    /// Negative log-posterior Hessian at `x_map`.
    pub precision: SpdMatrix,
    pub iterations: usize,
    pub grad_norm: f64,
    /// The Hessian had to be SPD-projected and an eigenvalue moved by more than 1e-8.
    pub indefinite_hessian: bool,
    /// Curvature from Gauss–Newton only.
    pub gauss_newton: bool,
}

impl LaplaceApprox {
    /// Wraps an exact Gaussian posterior.
    pub fn from_gaussian(dist: &GaussianDist) -> Result<Self> {
        Ok(Self {
            x_map: dist.mean.clone(),
            precision: SpdMatrix::new(dist.cov.inverse())?,
            iterations: 0,
            grad_norm: 0.0,
            indefinite_hessian: false,
            gauss_newton: false,
        })
    }
}

/// Eigenvalue floor at `SPD_FLOOR_REL · λ_max`; reports whether any eigenvalue moved by > 1e-8.
fn project_spd(m: &DMatrix<f64>) -> Result<(SpdMatrix, bool)> {
    if let Ok(spd) = SpdMatrix::new(m.clone()) {
        return Ok((spd, false));
    }
    let eig = sym_eig(m)?;
    let top = eig.values.max().abs().max(f64::MIN_POSITIVE);
    let floor = SPD_FLOOR_REL * top;
    let mut moved = false;
    let clamped = eig.values.map(|l| {
        let c = l.max(floor);
        moved |= (c - l).abs() > 1e-8;
        c
    });
    let rebuilt = &eig.vectors * DMatrix::from_diagonal(&clamped) * eig.vectors.transpose();
    Ok((SpdMatrix::new(symmetrize(&rebuilt))?, moved))
}

/// Trust-region Newton ascent on the log-posterior.
///
/// Takes the full Newton step whenever the negative Hessian is SPD and the
/// step fits in the region, otherwise a Steihaug–Toint step. Stops once
/// `‖∇‖ ≤ tol · (1 + ‖x‖)`.
pub fn map_newton<F: ForwardModel + ?Sized>(
    logpost: &LogPosterior<'_, F>,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LaplaceApprox> {
    let mut x = x0.clone();
    let mut cur = logpost.evaluate(&x)?;
    if !cur.value.is_finite() {
        return Err(Error::NonFiniteInput("log-posterior at starting point"));
    }
    let mut radius = (1.0 + x.norm()).max(1.0);
    let mut iterations = 0;
    let mut rejections = 0;
    loop {
        let grad_norm = cur.gradient.norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        if grad_norm <= tol * (1.0 + x.norm()) {
            break;
        }
        if iterations >= max_iter || rejections >= MAX_CONSECUTIVE_REJECTIONS {
            return Err(Error::MaxIterationsExceeded(max_iter));
        }
        iterations += 1;

        // Minimize f = −log π: gradient g = −∇, Hessian H = −∇².
        let g = DMatrix::from_column_slice(x.len(), 1, (-&cur.gradient).as_slice());
        let h = -&cur.hessian;
        let newton = SpdMatrix::new(h.clone())
            .ok()
            .and_then(|spd| spd.solve(&g).ok())
            .map(|s| -s)
            .filter(|s| s.norm() <= radius);
        let (step, boundary) = match newton {
            Some(s) => (s, false),
            None => {
                let out = truncated_cg(&g, |d| Ok(&h * d), radius, 2 * x.len() + 2)?;
                let hit = out.hit_boundary();
                (out.step, hit)
            }
        };
        let hs = &h * &step;
        let model_decrease = -(g.dot(&step) + 0.5 * step.dot(&hs));
        let candidate = &x + DVector::from_column_slice(step.as_slice());
        let f_old = -cur.value;
        let next = logpost.evaluate(&candidate).ok().filter(|e| e.value.is_finite());
        let f_new = next.as_ref().map_or(f64::INFINITY, |e| -e.value);
        let reg = f_old.abs().max(1.0) * f64::EPSILON * 1e3;
        // Below round-off in f the ratio is meaningless; fall back on gradient decrease.
        let in_noise = model_decrease.abs() <= reg;
        let rho = if model_decrease > 0.0 {
            (f_old - f_new + reg) / (model_decrease + reg)
        } else {
            f64::NEG_INFINITY
        };
        let step_norm = step.norm();
        if rho < 0.25 && !in_noise {
            radius = step_norm.max(f64::MIN_POSITIVE) / 4.0;
        } else if rho > 0.75 && (boundary || step_norm >= 0.99 * radius) {
            radius *= 2.0;
        }
        match next {
            Some(e) if (rho > 0.1 && f_new <= f_old) || (in_noise && e.gradient.norm() < grad_norm) => {
                x = candidate;
                cur = e;
                rejections = 0;
            }
            _ => rejections += 1,
        }
    }
    let (precision, indefinite_hessian) = project_spd(&(-&cur.hessian))?;
    Ok(LaplaceApprox {
        grad_norm: cur.gradient.norm(),
        x_map: x,
        precision,
        iterations,
        indefinite_hessian,
        gauss_newton: !logpost.exact_curvature(),
    })
}

/// Runs `map_newton` from `n_starts` prior draws and returns the largest
/// pairwise distance between solutions relative to `1 + mean ‖x‖`.
pub fn check_unimodal<F: ForwardModel + ?Sized>(
    logpost: &LogPosterior<'_, F>,
    n_starts: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if n_starts < 2 {
        return Err(Error::InvalidArgument("unimodality check needs at least two starts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = logpost.prior().sample(n_starts, &mut rng);
    let sols = starts
        .iter()
        .map(|x0| map_newton(logpost, x0, tol, max_iter).map(|l| l.x_map))
        .collect::<Result<Vec<_>>>()?;
    let mean_norm = sols.iter().map(|x| x.norm()).sum::<f64>() / sols.len() as f64;
    let mut spread: f64 = 0.0;
    for (i, a) in sols.iter().enumerate() {
        for b in &sols[i + 1..] {
            spread = spread.max((a - b).norm());
        }
    }
    Ok(spread / (1.0 + mean_norm))
}

/// Relative MAP and Laplace-precision errors of reduced against full solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapErrorReport {
    /// `Σ ‖x_V − x‖ / Σ ‖x‖`
    pub eps: f64,
    /// `Σ ‖C_V⁻¹ − C⁻¹‖_F / Σ ‖C⁻¹‖_F`
    pub eps_h: f64,
    /// Per-realization ratios `(ε̂, ε̂_H)`.
    pub per_sample: Vec<(f64, f64)>,
    pub n_samples: usize,
}

pub fn map_errors(full: &[LaplaceApprox], reduced: &[LaplaceApprox]) -> Result<MapErrorReport> {
    if full.is_empty() {
        return Err(Error::EmptyInput("map_errors"));
    }
    if full.len() != reduced.len() {
        return Err(Error::DimensionMismatch {
            context: "map_errors pairs",
            expected: full.len(),
            found: reduced.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut num_h = 0.0;
    let mut den_h = 0.0;
    let mut per_sample = Vec::with_capacity(full.len());
    for (f, r) in full.iter().zip(reduced) {
        if f.x_map.len() != r.x_map.len() {
            return Err(Error::DimensionMismatch {
                context: "map_errors parameter dimension",
                expected: f.x_map.len(),
                found: r.x_map.len(),
            });
        }
        let e = (&r.x_map - &f.x_map).norm();
        let s = f.x_map.norm();
        let e_h = (r.precision.matrix() - f.precision.matrix()).norm();
        let s_h = f.precision.matrix().norm();
        num += e;
        den += s;
        num_h += e_h;
        den_h += s_h;
        per_sample.push((ratio(e, s), ratio(e_h, s_h)));
    }
    Ok(MapErrorReport {
        eps: ratio(num, den),
        eps_h: ratio(num_h, den_h),
        per_sample,
        n_samples: full.len(),
    })
}

/// `a / b`, with `0 / 0 = 0`.
fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{random_linear_model, random_matrix, random_spd, random_vector};
    use rand::Rng;

    /// `A(x) = x²` componentwise, giving symmetric modes for positive data.
    struct Square;
    impl ForwardModel for Square {
        fn n_obs(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
            x.map(|v| v * v)
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 2.0 * x[0])
        }
        fn weighted_hessian(&self, _x: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_element(1, 1, 2.0 * w[0]))
        }
        fn moments(&self, _prior: &GaussianDist) -> Result<ModelMoments> {
            Err(Error::InvalidArgument("not needed".into()))
        }
    }

    fn gauss_newton_only(design: DMatrix<f64>) -> impl ForwardModel {
        struct Gn(LognormalForward);
        impl ForwardModel for Gn {
            fn n_obs(&self) -> usize {
                self.0.n_obs()
            }
            fn n_params(&self) -> usize {
                self.0.n_params()
            }
            fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.eval(x)
            }
            fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
                self.0.jacobian(x)
            }
            fn moments(&self, prior: &GaussianDist) -> Result<ModelMoments> {
                self.0.moments(prior)
            }
        }
        Gn(LognormalForward { design })
    }

    fn mc_check(design: &DMatrix<f64>, cov: &SpdMatrix, draws: usize, seed: u64) {
        let mm = lognormal_moments(design, cov).unwrap();
        let prior = GaussianDist::new(DVector::zeros(cov.dim()), cov.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = prior.sample(draws, &mut rng);
        let (n, q) = design.shape();
        let nf = draws as f64;
        let a: Vec<DVector<f64>> = xs.iter().map(|x| (design * x).map(f64::exp)).collect();
        // Each statistic is a sample mean of i.i.d. terms; compare at 3 standard errors
        // using the sample variance of those terms.
        let check = |terms: &mut dyn Iterator<Item = f64>, expected: f64, what: &str| {
            let v: Vec<f64> = terms.collect();
            let mean = v.iter().sum::<f64>() / nf;
            let var = v.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            assert!((mean - expected).abs() <= 3.0 * se + 1e-12, "{what}: {mean} vs {expected} (se {se})");
        };
        for i in 0..n {
            check(&mut a.iter().map(|ai| ai[i]), mm.mean_a[i], "mean");
            for j in 0..n {
                // Centered at the exact means so the estimator is a plain sample mean.
                check(
                    &mut a.iter().map(|ai| (ai[i] - mm.mean_a[i]) * (ai[j] - mm.mean_a[j])),
                    mm.cov_a[(i, j)],
                    "cov",
                );
            }
            for k in 0..q {
                check(&mut a.iter().zip(&xs).map(|(ai, x)| (ai[i] - mm.mean_a[i]) * x[k]), mm.cross_ax[(i, k)], "cross");
            }
        }
    }

    #[test]
    fn lognormal_moments_degenerate_variance() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let tiny = SpdMatrix::new(DMatrix::from_element(1, 1, 1e-300)).unwrap();
        let mm = lognormal_moments(&b, &tiny).unwrap();
        assert!(mm.mean_a.iter().all(|&m| m == 1.0));
        assert!(mm.cov_a.amax() < 1e-290 && mm.cross_ax.amax() < 1e-290);
    }

    #[test]
    fn lognormal_moments_scalar_closed_form() {
        let e = std::f64::consts::E;
        let mm = lognormal_moments(&DMatrix::from_element(1, 1, 1.0), &SpdMatrix::identity(1)).unwrap();
        assert!((mm.mean_a[0] - e.sqrt()).abs() < 1e-15);
        assert!((mm.cov_a[(0, 0)] - e * (e - 1.0)).abs() < 1e-14);
        assert!((mm.cross_ax[(0, 0)] - e.sqrt()).abs() < 1e-15);
        mc_check(&DMatrix::from_element(1, 1, 1.0), &SpdMatrix::identity(1), 1_000_000, 1);
    }

    #[test]
    fn lognormal_moments_monte_carlo_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_matrix(&mut rng, 4, 2) * 0.5;
        let cov = random_spd(&mut rng, 2, 0.2);
        mc_check(&b, &cov, 1_000_000, 3);
        let mm = lognormal_moments(&b, &cov).unwrap();
        assert!(sym_eig(&mm.cov_a).unwrap().values.min() >= -1e-12);
    }

    #[test]
    fn lognormal_moments_overflow_guard() {
        let b = DMatrix::from_element(1, 1, 30.0);
        assert!(matches!(
            lognormal_moments(&b, &SpdMatrix::identity(1)),
            Err(Error::MomentOverflow(_))
        ));
    }

    #[test]
    fn jacobian_and_curvature_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let design = random_matrix(&mut rng, 6, 3);
        let fwd = LognormalForward { design };
        let prior = GaussianDist::new(random_vector(&mut rng, 3), random_spd(&mut rng, 3, 0.5)).unwrap();
        let noise = GaussianDist::new(random_vector(&mut rng, 6), random_spd(&mut rng, 6, 0.3)).unwrap();
        let y = random_vector(&mut rng, 6).map(|v| v + 2.0);
        let basis = SubspaceBasis::new(random_matrix(&mut rng, 6, 2)).unwrap();
        let h = 1e-6;
        for _ in 0..5 {
            let x = random_vector(&mut rng, 3);
            let j = fwd.jacobian(&x);
            for k in 0..3 {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (fwd.eval(&xp) - fwd.eval(&xm)) / (2.0 * h);
                assert!((fd - j.column(k)).norm() <= 1e-5 * j.column(k).norm());
            }
            for v in [None, Some(&basis)] {
                let lp = LogPosterior::new(&fwd, &prior, &noise, &y, v).unwrap();
                let e = lp.evaluate(&x).unwrap();
                assert!((lp.value(&x).unwrap() - e.value).abs() <= 1e-12 * e.value.abs().max(1.0));
                for k in 0..3 {
                    let mut xp = x.clone();
                    xp[k] += h;
                    let mut xm = x.clone();
                    xm[k] -= h;
                    let ep = lp.evaluate(&xp).unwrap();
                    let em = lp.evaluate(&xm).unwrap();
                    let g_fd = (ep.value - em.value) / (2.0 * h);
                    assert!((g_fd - e.gradient[k]).abs() <= 1e-5 * e.gradient.norm().max(1.0));
                    let h_fd = (ep.gradient - em.gradient) / (2.0 * h);
                    assert!((h_fd - e.hessian.column(k)).norm() <= 1e-3 * e.hessian.norm());
                }
            }
        }
    }

    fn linear_instance(seed: u64, n: usize, q: usize) -> (LinearForward, GaussianDist, GaussianDist, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_linear_model(&mut rng, n, q, false);
        let y = random_vector(&mut rng, n) * 3.0;
        (LinearForward { design: model.design }, model.prior, model.noise, y)
    }

    #[test]
    fn linear_map_reproduces_exact_posteriors() {
        for seed in 0..5 {
            let (fwd, prior, noise, y) = linear_instance(seed, 8, 3);
            let problem = crate::model::GaussianProblem::new(fwd.moments(&prior).unwrap(), prior.clone(), noise.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let basis = SubspaceBasis::new(random_matrix(&mut rng, 8, 2)).unwrap();
            for v in [None, Some(&basis)] {
                let (post, _) = match v {
                    None => problem.posterior_full(&y).unwrap(),
                    Some(b) => problem.posterior_reduced(b, &y).unwrap(),
                };
                let lp = LogPosterior::new(&fwd, &prior, &noise, &y, v).unwrap();
                let lap = map_newton(&lp, &DVector::zeros(3), 1e-12, 50).unwrap();
                assert!((&lap.x_map - &post.mean).norm() <= 1e-8);
                let cov = lap.precision.inverse();
                assert!((cov - post.cov.matrix()).norm() <= 1e-8 * post.cov.matrix().norm());
                assert!(!lap.indefinite_hessian && !lap.gauss_newton);
            }
        }
    }

    #[test]
    fn zero_forward_gives_prior_mean() {
        let (_, prior, noise, y) = linear_instance(10, 5, 2);
        let fwd = LinearForward { design: DMatrix::zeros(5, 2) };
        let lp = LogPosterior::new(&fwd, &prior, &noise, &y, None).unwrap();
        let lap = map_newton(&lp, &DVector::from_element(2, 4.0), 1e-12, 50).unwrap();
        assert!((&lap.x_map - &prior.mean).norm() <= 1e-10);
    }

    #[test]
    fn converged_start_takes_no_iterations() {
        let (fwd, prior, noise, y) = linear_instance(11, 6, 2);
        let lp = LogPosterior::new(&fwd, &prior, &noise, &y, None).unwrap();
        let lap = map_newton(&lp, &DVector::zeros(2), 1e-10, 50).unwrap();
        let again = map_newton(&lp, &lap.x_map, 1e-10, 50).unwrap();
        assert_eq!(again.iterations, 0);
        assert_eq!(again.x_map, lap.x_map);
    }

    fn lognormal_desk(seed: u64, n: usize, q: usize) -> (LognormalForward, GaussianDist, GaussianDist, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = random_matrix(&mut rng, n, q) * 0.4;
        let prior = GaussianDist::standard(q);
        let noise = GaussianDist::new(DVector::zeros(n), SpdMatrix::new(DMatrix::identity(n, n) * 0.01).unwrap()).unwrap();
        let fwd = LognormalForward { design };
        let x_true = prior.sample(1, &mut rng).remove(0);
        let y = fwd.eval(&x_true) + DVector::from_fn(n, |_, _| 0.1 * rng.random_range(-1.0..1.0));
        (fwd, prior, noise, y)
    }

    #[test]
    fn lognormal_map_converges_quickly() {
        let (fwd, prior, noise, y) = lognormal_desk(12, 20, 3);
        let lp = LogPosterior::new(&fwd, &prior, &noise, &y, None).unwrap();
        let lap = map_newton(&lp, &prior.mean, 1e-8, 50).unwrap();
        assert!(lap.iterations < 50);
        assert!(lap.grad_norm <= 1e-8 * (1.0 + lap.x_map.norm()));
        assert!(!lp.evaluate(&lap.x_map).is_err());
    }

    #[test]
    fn gauss_newton_forward_is_flagged() {
        let (fwd, prior, noise, y) = lognormal_desk(13, 10, 2);
        let gn = gauss_newton_only(fwd.design.clone());
        let lp = LogPosterior::new(&gn, &prior, &noise, &y, None).unwrap();
        assert!(!lp.exact_curvature());
        let lap = map_newton(&lp, &prior.mean, 1e-8, 200).unwrap();
        assert!(lap.gauss_newton);
    }

    #[test]
    fn unimodality_detector() {
        let (fwd, prior, noise, y) = linear_instance(14, 6, 3);
        let lp = LogPosterior::new(&fwd, &prior, &noise, &y, None).unwrap();
        assert!(check_unimodal(&lp, 10, 1, 1e-10, 100).unwrap() <= 1e-6);

        let (fwd, prior, noise, y) = lognormal_desk(15, 20, 3);
        let lp = LogPosterior::new(&fwd, &prior, &noise, &y, None).unwrap();
        assert!(check_unimodal(&lp, 20, 2, 1e-10, 100).unwrap() <= 1e-4);

        let prior = GaussianDist::standard(1);
        let noise = GaussianDist::new(DVector::zeros(1), SpdMatrix::new(DMatrix::from_element(1, 1, 0.01)).unwrap()).unwrap();
        let y = DVector::from_element(1, 1.0);
        let lp = LogPosterior::new(&Square, &prior, &noise, &y, None).unwrap();
        assert!(check_unimodal(&lp, 20, 3, 1e-10, 100).unwrap() > 0.1);
        assert!(check_unimodal(&lp, 1, 3, 1e-10, 100).is_err());
    }

    fn laplace(x: &[f64], precision: DMatrix<f64>) -> LaplaceApprox {
        LaplaceApprox {
            x_map: DVector::from_column_slice(x),
            precision: SpdMatrix::new(precision).unwrap(),
            iterations: 0,
            grad_norm: 0.0,
            indefinite_hessian: false,
            gauss_newton: false,
        }
    }

    #[test]
    fn map_error_cases() {
        let a = laplace(&[3.0, 4.0], DMatrix::identity(2, 2));
        let same = map_errors(&[a.clone()], &[a.clone()]).unwrap();
        assert_eq!((same.eps, same.eps_h), (0.0, 0.0));

        let b = laplace(&[0.0, 0.0], DMatrix::identity(2, 2));
        let rep = map_errors(&[a.clone()], &[b]).unwrap();
        assert_eq!(rep.per_sample[0].0, 1.0);
        assert!(map_errors(&[], &[]).is_err());
        assert!(map_errors(&[a.clone()], &[]).is_err());
    }

    #[test]
    fn map_errors_are_ratio_of_sums_and_scale_free() {
        let full = vec![laplace(&[1.0, 0.0], DMatrix::identity(2, 2)), laplace(&[10.0, 0.0], DMatrix::identity(2, 2) * 2.0)];
        let red = vec![laplace(&[2.0, 0.0], DMatrix::identity(2, 2)), laplace(&[10.0, 1.0], DMatrix::identity(2, 2) * 3.0)];
        let rep = map_errors(&full, &red).unwrap();
        assert!((rep.eps - 2.0 / 11.0).abs() < 1e-15);
        let mean_of_ratios = (1.0 + 0.1) / 2.0;
        assert!((rep.eps - mean_of_ratios).abs() > 0.1);

        let scale = |v: &[LaplaceApprox], c: f64| -> Vec<LaplaceApprox> {
            v.iter()
                .map(|l| laplace((&l.x_map * c).as_slice(), l.precision.matrix() * c))
                .collect()
        };
        let scaled = map_errors(&scale(&full, 7.5), &scale(&red, 7.5)).unwrap();
        assert!((scaled.eps - rep.eps).abs() < 1e-14);
        assert!((scaled.eps_h - rep.eps_h).abs() < 1e-14);
    }

    #[test]
    fn identity_reduction_is_exact() {
        let (fwd, prior, noise, y) = linear_instance(16, 7, 3);
        let full = LogPosterior::new(&fwd, &prior, &noise, &y, None).unwrap();
        let id = SubspaceBasis::identity(7);
        let red = LogPosterior::new(&fwd, &prior, &noise, &y, Some(&id)).unwrap();
        let a = map_newton(&full, &prior.mean, 1e-12, 50).unwrap();
        let b = map_newton(&red, &prior.mean, 1e-12, 50).unwrap();
        let rep = map_errors(&[a], &[b]).unwrap();
        assert!(rep.eps <= 1e-8 && rep.eps_h <= 1e-8);
    }

    #[test]
    fn spd_projection_floors_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let (spd, moved) = project_spd(&m).unwrap();
        assert!(moved);
        assert!((spd.matrix()[(1, 1)] - 2e-12).abs() < 1e-20);
        let (_, moved) = project_spd(&DMatrix::identity(2, 2)).unwrap();
        assert!(!moved);
    }
}
