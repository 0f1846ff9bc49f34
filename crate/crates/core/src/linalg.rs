//! Dense symmetric and SPD linear algebra.
//!
//! Every inverse that appears in the posterior formulas is applied through a
//! Cholesky solve; no routine here forms an explicit inverse except
//! [`SpdMatrix::inverse`], which exists for the precision-matrix error metrics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Inputs whose relative asymmetry exceeds this are rejected rather than symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Relative threshold below which a PSD eigenvalue is treated as an exact zero.
pub const EIG_CLAMP_REL: f64 = 1e-12;

/// Relative pivot threshold used for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `max |m_ij - m_ji| / max |m_ij|`, zero for the zero matrix.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

fn check_square(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(context));
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    check_square(m, context)?;
    let asymmetry = relative_asymmetry(m);
    if asymmetry > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(symmetrize(m))
}

/// A symmetric positive definite matrix together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    /// Symmetrizes `m` and factors it.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let mat = check_symmetric(&m, "SpdMatrix")?;
        Self::from_symmetric(mat)
    }

    fn from_symmetric(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() == 0 {
            return Err(Error::EmptyInput("SpdMatrix"));
        }
        let chol = Cholesky::new(mat.clone()).ok_or(Error::NotPositiveDefinite {
            context: "cholesky",
        })?;
        // nalgebra accepts tiny positive pivots that underflow the log; reject them here.
        if chol.l_dirty().diagonal().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite { context: "cholesky" });
        }
        Ok(Self { mat, chol })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_symmetric(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn from_diagonal(diag: &DVector<f64>) -> Result<Self> {
        Self::from_symmetric(DMatrix::from_diagonal(diag))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    /// Lower-triangular `L` with `self = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "solve_spd",
                expected: self.dim(),
                found: rhs.nrows(),
            });
        }
        Ok(self.chol.solve(rhs))
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "solve_spd",
                expected: self.dim(),
                found: rhs.len(),
            });
        }
        Ok(self.chol.solve(rhs))
    }

    /// `L⁻¹ rhs` (whitening by the Cholesky factor).
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(rhs)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L⁻ᵀ rhs`.
    pub fn solve_upper(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(rhs)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `xᵀ self⁻¹ x`.
    pub fn inv_quad(&self, x: &DVector<f64>) -> Result<f64> {
        let z = self.solve_vec(x)?;
        Ok(x.dot(&z))
    }

    /// `trace(self⁻¹ m)`.
    pub fn inv_trace(&self, m: &DMatrix<f64>) -> Result<f64> {
        Ok(self.solve(m)?.trace())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }
}

/// Cholesky factor `L` (lower, positive diagonal) of a symmetric positive definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SpdMatrix::new(m.clone())?.factor())
}

pub fn logdet_spd(m: &SpdMatrix) -> f64 {
    m.logdet()
}

pub fn solve_spd(m: &SpdMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.solve(rhs)
}

/// Eigenvalues sorted non-increasing with matching eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The first `r` eigenvector columns.
    pub fn leading_vectors(&self, r: usize) -> DMatrix<f64> {
        self.vectors.columns(0, r).into_owned()
    }
}

/// Sorts descending and flips each vector so its largest-magnitude entry is positive.
fn sorted_pairs(values: DVector<f64>, vectors: DMatrix<f64>) -> EigenPairs {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let sorted_values = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
    let mut sorted_vectors = DMatrix::zeros(vectors.nrows(), n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = vectors.column(i).into_owned();
        let pivot = col.iter().fold(0.0_f64, |best, &v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
        sorted_vectors.set_column(k, &col);
    }
    EigenPairs {
        values: sorted_values,
        vectors: sorted_vectors,
    }
}

/// Symmetric eigendecomposition, values descending, orthonormal vectors.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<EigenPairs> {
    let sym = check_symmetric(m, "sym_eig")?;
    let eig = sym.symmetric_eigen();
    Ok(sorted_pairs(eig.eigenvalues, eig.eigenvectors))
}

/// Generalized problem `a v = λ b v` with `b` SPD.
///
/// Reduced to the standard problem for `L⁻¹ a L⁻ᵀ` with `b = L Lᵀ`; eigenvectors
/// are mapped back by `v = L⁻ᵀ u` and are therefore `b`-orthonormal. Eigenvalues
/// within `EIG_CLAMP_REL` of zero (relative to the largest magnitude) are set to zero.
pub fn gen_eig_spd(a: &DMatrix<f64>, b: &SpdMatrix) -> Result<EigenPairs> {
    let a = check_symmetric(a, "gen_eig_spd")?;
    if a.nrows() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "gen_eig_spd",
            expected: b.dim(),
            found: a.nrows(),
        });
    }
    let half = b.solve_lower(&a);
    let reduced = symmetrize(&b.solve_lower(&half.transpose()));
    let eig = reduced.symmetric_eigen();
    let mut values = eig.eigenvalues;
    let scale = values.amax();
    for v in values.iter_mut() {
        if v.abs() <= EIG_CLAMP_REL * scale {
            *v = 0.0;
        }
    }
    let vectors = b.solve_upper(&eig.eigenvectors);
    Ok(sorted_pairs(values, vectors))
}

/// Numerical column rank from column-pivoted QR: pivots above `rel_tol · |r₁₁|`.
pub fn column_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let lead = diag.first().copied().unwrap_or(0.0);
    if lead == 0.0 || !lead.is_finite() {
        return 0;
    }
    diag.iter().filter(|&&d| d > rel_tol * lead).count()
}

/// Thin QR `m = Q R` with `R` having a positive diagonal.
pub fn thin_qr(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, r) = m.shape();
    if r > n {
        return Err(Error::DimensionMismatch {
            context: "thin_qr",
            expected: n,
            found: r,
        });
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut rr = qr.r();
    let scale = m.norm().max(f64::MIN_POSITIVE);
    for i in 0..r {
        let d = rr[(i, i)];
        if !(d.abs() > RANK_TOL * scale) {
            return Err(Error::RankCollapse);
        }
        if d < 0.0 {
            q.column_mut(i).neg_mut();
            rr.row_mut(i).neg_mut();
        }
    }
    Ok((q, rr))
}

/// Orthonormal basis for the range of a full-column-rank matrix.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    thin_qr(m).map(|(q, _)| q)
}

/// Sines of the principal angles between `range(a)` and `range(b)`, descending.
///
/// Both inputs are orthonormalized first; the sines are the singular values of
/// `(I - QaQaᵀ) Qb`, which stays accurate for tiny angles.
pub fn principal_angle_sines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "principal_angle_sines",
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    let qa = orthonormalize(a)?;
    let qb = orthonormalize(b)?;
    let resid = &qb - &qa * (qa.transpose() * &qb);
    let mut sv = resid.singular_values();
    sv.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

/// Largest principal angle (radians) between two subspaces.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let s = principal_angle_sines(a, b)?;
    Ok(s.iter().fold(0.0_f64, |m, &v| m.max(v)).min(1.0).asin())
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().amax()
}
