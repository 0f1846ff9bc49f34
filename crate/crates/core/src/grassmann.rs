//! Riemannian trust-region minimization over the Grassmann manifold Gr(r, n).
//!
//! Points are stored as orthonormal `n × r` representatives. Tangent vectors are
//! horizontal (`Vᵀ Δ = 0`), the metric is the Frobenius inner product and the
//! retraction is the Q factor of a thin QR. Subproblems are solved by
//! Steihaug–Toint truncated CG; Hessian-vector products are forward finite
//! differences of the Riemannian gradient projected back onto the current
//! tangent space, which reproduces the Riemannian Hessian including its
//! curvature term to first order in the step.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_qr;

const ORTHONORMAL_TOL: f64 = 1e-10;
const MAX_CONSECUTIVE_REJECTIONS: usize = 25;

/// Orthonormal representative of a point of Gr(r, n).
#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannPoint {
    basis: DMatrix<f64>,
}

impl GrassmannPoint {
    /// Accepts an already orthonormal basis.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let r = basis.ncols();
        if r == 0 || r > basis.nrows() {
            return Err(Error::InvalidArgument(format!(
                "Grassmann point needs 1 <= r <= n, got {r} x {}",
                basis.nrows()
            )));
        }
        let drift = (basis.transpose() * &basis - DMatrix::identity(r, r)).norm();
        if !(drift <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "basis is not orthonormal (drift {drift:.2e})"
            )));
        }
        Ok(Self { basis })
    }

    /// Orthonormalizes any full-column-rank matrix.
    pub fn from_span(m: &DMatrix<f64>) -> Result<Self> {
        let (q, _) = thin_qr(m)?;
        Self::new(q)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn into_basis(self) -> DMatrix<f64> {
        self.basis
    }

    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    pub fn r(&self) -> usize {
        self.basis.ncols()
    }
}

/// Horizontal tangent vector at some point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub delta: DMatrix<f64>,
}

impl TangentVector {
    pub fn norm(&self) -> f64 {
        self.delta.norm()
    }

    pub fn zeros(n: usize, r: usize) -> Self {
        Self {
            delta: DMatrix::zeros(n, r),
        }
    }
}

/// `(I − V Vᵀ) Z`.
pub fn project_tangent(v: &GrassmannPoint, z: &DMatrix<f64>) -> Result<TangentVector> {
    if z.shape() != v.basis.shape() {
        return Err(Error::DimensionMismatch {
            context: "project_tangent",
            expected: v.n() * v.r(),
            found: z.nrows() * z.ncols(),
        });
    }
    let vb = &v.basis;
    let mut delta = z - vb * (vb.transpose() * z);
    // A second pass removes the component reintroduced by round-off.
    let resid = vb.transpose() * &delta;
    delta -= vb * resid;
    Ok(TangentVector { delta })
}

/// `qf(V + Δ)` with the R factor's diagonal positive.
pub fn retract_qr(v: &GrassmannPoint, d: &TangentVector) -> Result<GrassmannPoint> {
    if d.delta.shape() != v.basis.shape() {
        return Err(Error::DimensionMismatch {
            context: "retract_qr",
            expected: v.n() * v.r(),
            found: d.delta.nrows() * d.delta.ncols(),
        });
    }
    if d.delta.iter().all(|&x| x == 0.0) {
        return Ok(v.clone());
    }
    let (q, _) = thin_qr(&(&v.basis + &d.delta))?;
    GrassmannPoint::new(q)
}

/// A cost defined on full-rank `n × r` matrices, invariant under `V ↦ V M`.
pub trait GrassmannCost {
    fn cost(&self, v: &DMatrix<f64>) -> Result<f64>;

    /// Euclidean gradient; defaults to central differences with entrywise step
    /// `fd_step · (1 + |V_ij|)`.
    fn euclidean_gradient(&self, v: &DMatrix<f64>, fd_step: f64) -> Result<DMatrix<f64>> {
        central_difference_gradient(|m| self.cost(m), v, fd_step)
    }
}

pub fn central_difference_gradient(
    f: impl Fn(&DMatrix<f64>) -> Result<f64>,
    v: &DMatrix<f64>,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let mut grad = DMatrix::zeros(v.nrows(), v.ncols());
    let mut probe = v.clone();
    for j in 0..v.ncols() {
        for i in 0..v.nrows() {
            let h = fd_step * (1.0 + v[(i, j)].abs());
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let fp = f(&probe)?;
            probe[(i, j)] = orig - h;
            let fm = f(&probe)?;
            probe[(i, j)] = orig;
            grad[(i, j)] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Riemannian gradient: horizontal projection of the Euclidean gradient.
pub fn riemannian_gradient<C: GrassmannCost + ?Sized>(
    cost: &C,
    v: &GrassmannPoint,
    fd_step: f64,
) -> Result<TangentVector> {
    let g = cost.euclidean_gradient(v.basis(), fd_step)?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    project_tangent(v, &g)
}

/// Why truncated CG returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CgStop {
    NegativeCurvature,
    ExceededRadius,
    Converged,
    MaxInner,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub step: DMatrix<f64>,
    /// Hessian applied to `step`.
    pub hess_step: DMatrix<f64>,
    pub stop: CgStop,
    pub inner_iterations: usize,
}

impl CgOutcome {
    pub fn hit_boundary(&self) -> bool {
        matches!(self.stop, CgStop::NegativeCurvature | CgStop::ExceededRadius)
    }

    /// `m(0) − m(step)` for the quadratic model with gradient `grad`.
    pub fn model_decrease(&self, grad: &DMatrix<f64>) -> f64 {
        -(grad.dot(&self.step) + 0.5 * self.step.dot(&self.hess_step))
    }
}

/// Steihaug–Toint truncated conjugate gradient for
/// `min ⟨g, s⟩ + ½ ⟨H s, s⟩` subject to `‖s‖ ≤ radius`.
///
/// `hess_vec` must map into the same (tangent) space it is given.
pub fn truncated_cg(
    grad: &DMatrix<f64>,
    mut hess_vec: impl FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    radius: f64,
    max_inner: usize,
) -> Result<CgOutcome> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("trust radius must be positive, got {radius}")));
    }
    let shape = grad.shape();
    let mut step = DMatrix::zeros(shape.0, shape.1);
    let mut hess_step = DMatrix::zeros(shape.0, shape.1);
    let mut resid = grad.clone();
    let mut r_r = resid.dot(&resid);
    let norm_r0 = r_r.sqrt();
    if norm_r0 == 0.0 {
        return Ok(CgOutcome {
            step,
            hess_step,
            stop: CgStop::Converged,
            inner_iterations: 0,
        });
    }
    let mut dir = -&resid;
    // ⟨s, s⟩, ⟨s, d⟩, ⟨d, d⟩
    let mut s_s = 0.0;
    let mut s_d = 0.0;
    let mut d_d = r_r;
    let kappa = 0.1;
    let radius2 = radius * radius;

    for j in 0..max_inner.max(1) {
        let hd = hess_vec(&dir)?;
        let d_hd = dir.dot(&hd);
        let alpha = r_r / d_hd;
        let s_s_new = s_s + 2.0 * alpha * s_d + alpha * alpha * d_d;
        if !(d_hd > 0.0) || s_s_new >= radius2 {
            let tau = (-s_d + (s_d * s_d + d_d * (radius2 - s_s)).max(0.0).sqrt()) / d_d;
            step += &dir * tau;
            hess_step += &hd * tau;
            let stop = if d_hd > 0.0 {
                CgStop::ExceededRadius
            } else {
                CgStop::NegativeCurvature
            };
            return Ok(CgOutcome {
                step,
                hess_step,
                stop,
                inner_iterations: j + 1,
            });
        }
        step += &dir * alpha;
        hess_step += &hd * alpha;
        s_s = s_s_new;
        resid += &hd * alpha;
        let r_r_new = resid.dot(&resid);
        if r_r_new.sqrt() <= norm_r0 * norm_r0.min(kappa) {
            return Ok(CgOutcome {
                step,
                hess_step,
                stop: CgStop::Converged,
                inner_iterations: j + 1,
            });
        }
        let beta = r_r_new / r_r;
        r_r = r_r_new;
        dir = &dir * beta - &resid;
        s_d = beta * (s_d + alpha * d_d);
        d_d = r_r + beta * beta * d_d;
    }
    Ok(CgOutcome {
        step,
        hess_step,
        stop: CgStop::MaxInner,
        inner_iterations: max_inner.max(1),
    })
}

/// Trust-region hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionConfig {
    /// Initial radius; `None` uses `delta_max / 8`.
    pub delta0: Option<f64>,
    /// Maximum radius; `None` uses `π √r / 2`.
    pub delta_max: Option<f64>,
    pub rho_accept: f64,
    pub rho_expand: f64,
    pub grad_tol: f64,
    pub max_outer: usize,
    /// `None` uses `4 r (n − r)` (at least 1).
    pub max_inner: Option<usize>,
    pub fd_step: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            delta0: None,
            delta_max: None,
            rho_accept: 0.25,
            rho_expand: 0.75,
            grad_tol: 1e-8,
            max_outer: 500,
            max_inner: None,
            fd_step: 1e-6,
        }
    }
}

impl TrustRegionConfig {
    fn resolve(&self, n: usize, r: usize) -> Result<(f64, f64, usize)> {
        let delta_max = self
            .delta_max
            .unwrap_or(std::f64::consts::FRAC_PI_2 * (r as f64).sqrt());
        let delta0 = self.delta0.unwrap_or(delta_max / 8.0);
        let max_inner = self.max_inner.unwrap_or((4 * r * (n - r)).max(1));
        if !(0.0 < self.rho_accept && self.rho_accept < self.rho_expand && self.rho_expand < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < rho_accept < rho_expand < 1, got {} and {}",
                self.rho_accept, self.rho_expand
            )));
        }
        if !(delta0 > 0.0 && delta0 <= delta_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < delta0 <= delta_max, got {delta0} and {delta_max}"
            )));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig("fd_step must be positive".into()));
        }
        Ok((delta0, delta_max, max_inner))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost at the iterate the step was computed from.
    pub cost: f64,
    pub grad_norm: f64,
    /// Radius used for this step.
    pub delta: f64,
    pub rho: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged,
    MaxIterationsExceeded,
    /// Too many consecutive rejected steps.
    Stagnated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
    pub status: SolverStatus,
    pub final_cost: f64,
    pub final_grad_norm: f64,
}

impl SolverTrace {
    pub fn accepted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }

    /// CSV with header `iteration,cost,grad_norm,delta,rho,accepted`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,cost,grad_norm,delta,rho,accepted\n");
        for r in &self.records {
            let rho = if r.rho.is_finite() {
                r.rho.to_string()
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, r.cost, r.grad_norm, r.delta, rho, r.accepted
            );
        }
        out
    }
}

/// Projected forward difference of the Riemannian gradient along a retraction.
fn approx_hess_vec<C: GrassmannCost + ?Sized>(
    cost: &C,
    v: &GrassmannPoint,
    grad: &TangentVector,
    d: &DMatrix<f64>,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let norm = d.norm();
    if norm == 0.0 {
        return Ok(DMatrix::zeros(d.nrows(), d.ncols()));
    }
    let t = fd_step / norm;
    let moved = retract_qr(v, &TangentVector { delta: d * t })?;
    let g_moved = riemannian_gradient(cost, &moved, fd_step)?;
    let transported = project_tangent(v, &g_moved.delta)?;
    let hv = (transported.delta - &grad.delta) / t;
    Ok(project_tangent(v, &hv)?.delta)
}

/// Minimizes `cost` over Gr(r, n) starting from `v0`.
///
/// Never returns `Err` for running out of iterations: the best iterate comes
/// back with the trace flagged `MaxIterationsExceeded` or `Stagnated`.
pub fn trust_region_solve<C: GrassmannCost + ?Sized>(
    cost: &C,
    v0: &GrassmannPoint,
    cfg: &TrustRegionConfig,
) -> Result<(GrassmannPoint, SolverTrace)> {
    let (mut delta, delta_max, max_inner) = cfg.resolve(v0.n(), v0.r())?;
    let mut v = v0.clone();
    let mut f = cost.cost(v.basis())?;
    if !f.is_finite() {
        return Err(Error::NonFiniteInput("cost at initial point"));
    }
    let mut grad = riemannian_gradient(cost, &v, cfg.fd_step)?;
    let mut grad_norm = grad.norm();
    let mut records = Vec::new();
    let mut rejections = 0;
    let mut status = SolverStatus::MaxIterationsExceeded;

    for iteration in 0..cfg.max_outer {
        if grad_norm <= cfg.grad_tol {
            status = SolverStatus::Converged;
            break;
        }
        let outcome = truncated_cg(
            &grad.delta,
            |d| approx_hess_vec(cost, &v, &grad, d, cfg.fd_step),
            delta,
            max_inner,
        )?;
        let step = project_tangent(&v, &outcome.step)?;
        let model_decrease = outcome.model_decrease(&grad.delta);
        let (candidate, f_new) = match retract_qr(&v, &step) {
            Ok(c) => {
                let fc = cost.cost(c.basis());
                match fc {
                    Ok(fc) if fc.is_finite() => (Some(c), fc),
                    _ => (None, f64::INFINITY),
                }
            }
            Err(_) => (None, f64::INFINITY),
        };
        // Guards the ratio when both reductions are at round-off level.
        let reg = f.abs().max(1.0) * f64::EPSILON * 1e3;
        let rho = if model_decrease > 0.0 {
            (f - f_new + reg) / (model_decrease + reg)
        } else {
            f64::NEG_INFINITY
        };
        let step_norm = step.norm();
        let accepted = candidate.is_some() && rho > cfg.rho_accept && f_new <= f;

        records.push(IterationRecord {
            iteration,
            cost: f,
            grad_norm,
            delta,
            rho,
            step_norm,
            accepted,
            inner_iterations: outcome.inner_iterations,
        });

        if rho < 0.25 {
            delta /= 4.0;
        } else if rho > cfg.rho_expand && outcome.hit_boundary() {
            delta = (2.0 * delta).min(delta_max);
        }

        if accepted {
            v = candidate.expect("accepted steps have a candidate");
            f = f_new;
            grad = riemannian_gradient(cost, &v, cfg.fd_step)?;
            grad_norm = grad.norm();
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                status = SolverStatus::Stagnated;
                break;
            }
        }
    }
    if status == SolverStatus::MaxIterationsExceeded && grad_norm <= cfg.grad_tol {
        status = SolverStatus::Converged;
    }
    Ok((
        v,
        SolverTrace {
            records,
            status,
            final_cost: f,
            final_grad_norm: grad_norm,
        },
    ))
}
