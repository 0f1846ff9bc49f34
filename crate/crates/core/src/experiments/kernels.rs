//! Design matrices, covariance kernels and Gaussian sampling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::model::GaussianDist;

/// `B_ij = T_j(s_i)`, Chebyshev polynomials of the first kind, `j = 0..q`.
pub fn chebyshev_design(points: &[f64], q: usize) -> Result<DMatrix<f64>> {
    if let Some(&s) = points.iter().find(|s| !(s.abs() < 1.0)) {
        return Err(Error::PointOutOfRange(s));
    }
    let mut b = DMatrix::zeros(points.len(), q);
    for (i, &s) in points.iter().enumerate() {
        let (mut prev, mut cur) = (1.0, s);
        for j in 0..q {
            b[(i, j)] = match j {
                0 => 1.0,
                1 => s,
                _ => {
                    let next = 2.0 * s * cur - prev;
                    prev = cur;
                    cur = next;
                    next
                }
            };
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `σ² (1 + u d) exp(−u d)` with `u = √1200` and `d = |i − j| / (m − 1)` on indices.
    Matern32Indexed,
    /// `σ² exp(−‖s − s'‖ / ℓ)`
    Exponential,
    /// `σ² exp(−‖s − s'‖² / (2ℓ²))`
    SquaredExponential,
    /// `σ² δ(s − s')`
    White,
}

/// A stationary kernel plus a nugget variance on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Standard deviation `σ`.
    pub amplitude: f64,
    /// Ignored by the indexed and white families.
    pub length_scale: f64,
    /// Variance added to the diagonal.
    pub nugget: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, amplitude: f64, length_scale: f64, nugget: f64) -> Self {
        Self {
            family,
            amplitude,
            length_scale,
            nugget,
        }
    }

    fn validate(&self) -> Result<()> {
        let needs_length = matches!(self.family, KernelFamily::Exponential | KernelFamily::SquaredExponential);
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidArgument(format!("kernel amplitude must be positive, got {}", self.amplitude)));
        }
        if needs_length && !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::InvalidArgument(format!("nugget must be nonnegative, got {}", self.nugget)));
        }
        Ok(())
    }
}

const MATERN_INDEXED_RATE: f64 = 34.641016151377546; // √1200

/// Gram matrix over the rows of `locations` plus `nugget · I`, verified SPD.
pub fn build_kernel_matrix(spec: &KernelSpec, locations: &DMatrix<f64>) -> Result<SpdMatrix> {
    spec.validate()?;
    if locations.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("kernel locations"));
    }
    let m = locations.nrows();
    if m == 0 {
        return Err(Error::EmptyInput("kernel locations"));
    }
    let var = spec.amplitude * spec.amplitude;
    let dist = |i: usize, j: usize| (locations.row(i) - locations.row(j)).norm();
    let mut k = DMatrix::from_fn(m, m, |i, j| match spec.family {
        KernelFamily::Matern32Indexed => {
            if m == 1 {
                var
            } else {
                let d = MATERN_INDEXED_RATE * i.abs_diff(j) as f64 / (m - 1) as f64;
                var * (1.0 + d) * (-d).exp()
            }
        }
        KernelFamily::Exponential => var * (-dist(i, j) / spec.length_scale).exp(),
        KernelFamily::SquaredExponential => {
            let d = dist(i, j);
            var * (-d * d / (2.0 * spec.length_scale * spec.length_scale)).exp()
        }
        KernelFamily::White => {
            if i == j {
                var
            } else {
                0.0
            }
        }
    });
    for i in 0..m {
        k[(i, i)] += spec.nugget;
    }
    SpdMatrix::new(k).map_err(|_| Error::NotPositiveDefinite {
        context: "kernel matrix (nugget too small?)",
    })
}

/// `count` draws from `dist` on a ChaCha8 stream seeded by `seed`.
pub fn sample_gaussian(dist: &GaussianDist, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.sample(count, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chebyshev_rows() {
        let b = chebyshev_design(&[0.0, 0.5, 1.0 - 1e-12], 6).unwrap();
        let zero: Vec<f64> = b.row(0).iter().copied().collect();
        assert_eq!(zero, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]);
        assert!((b[(1, 2)] + 0.5).abs() < 1e-15);
        assert!(b.row(2).iter().all(|t| (t - 1.0).abs() < 1e-6));
        assert!(matches!(chebyshev_design(&[1.0], 3), Err(Error::PointOutOfRange(_))));
        assert!(chebyshev_design(&[-1.5], 3).is_err());
    }

    #[test]
    fn chebyshev_matches_trigonometric_form() {
        let pts: Vec<f64> = (0..9).map(|i| -0.95 + 0.2 * i as f64).collect();
        let b = chebyshev_design(&pts, 12).unwrap();
        for (i, s) in pts.iter().enumerate() {
            for j in 0..12 {
                let expected = (j as f64 * s.acos()).cos();
                assert!((b[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    fn indices(m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, 1, |i, _| i as f64)
    }

    #[test]
    fn zero_distance_values() {
        let locs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.1, -0.3, 0.9]);
        for family in [KernelFamily::Exponential, KernelFamily::SquaredExponential, KernelFamily::White] {
            let k = build_kernel_matrix(&KernelSpec::new(family, 0.7, 0.3, 0.0), &locs).unwrap();
            assert!(k.matrix().diagonal().iter().all(|&d| (d - 0.49).abs() < 1e-15));
        }
        let k = build_kernel_matrix(&KernelSpec::new(KernelFamily::Matern32Indexed, 1.3, 1.0, 0.0), &indices(30)).unwrap();
        assert!(k.matrix().diagonal().iter().all(|&d| (d - 1.69).abs() < 1e-15));
    }

    #[test]
    fn matern_indexed_corner_entry() {
        let k = build_kernel_matrix(&KernelSpec::new(KernelFamily::Matern32Indexed, 1.0, 1.0, 0.0), &indices(30)).unwrap();
        let u = 1200f64.sqrt();
        let expected = (1.0 + u) * (-u).exp();
        assert!((k.matrix()[(0, 29)] - expected).abs() <= 1e-15 * expected.max(1e-300) + 1e-28);
        assert!((expected - 3.3e-14).abs() < 0.1e-14);
    }

    #[test]
    fn white_family_is_scaled_identity() {
        let k = build_kernel_matrix(&KernelSpec::new(KernelFamily::White, 0.5, 0.0, 0.0), &indices(4)).unwrap();
        assert_eq!(k.matrix(), &(DMatrix::identity(4, 4) * 0.25));
    }

    #[test]
    fn nugget_and_validation() {
        let locs = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let spec = KernelSpec::new(KernelFamily::Exponential, 1.0, 0.1, 0.0);
        assert!(matches!(build_kernel_matrix(&spec, &locs), Err(Error::NotPositiveDefinite { .. })));
        let spec = KernelSpec::new(KernelFamily::Exponential, 1.0, 0.1, 1e-3);
        let k = build_kernel_matrix(&spec, &locs).unwrap();
        assert!((k.matrix()[(0, 0)] - 1.001).abs() < 1e-15);
        assert!(build_kernel_matrix(&KernelSpec::new(KernelFamily::Exponential, -1.0, 0.1, 0.0), &locs).is_err());
        assert!(build_kernel_matrix(&KernelSpec::new(KernelFamily::SquaredExponential, 1.0, 0.0, 0.0), &locs).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let dist = GaussianDist::new(DVector::from_vec(vec![1.0, -2.0]), SpdMatrix::identity(2)).unwrap();
        assert_eq!(sample_gaussian(&dist, 5, 9), sample_gaussian(&dist, 5, 9));
        assert_ne!(sample_gaussian(&dist, 5, 9), sample_gaussian(&dist, 5, 10));
    }

    #[test]
    fn sample_moments_within_three_standard_errors() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let mean = DVector::from_vec(vec![0.5, -1.0]);
        let dist = GaussianDist::new(mean.clone(), SpdMatrix::new(cov.clone()).unwrap()).unwrap();
        let count = 100_000;
        let xs = sample_gaussian(&dist, count, 4);
        let nf = count as f64;
        for i in 0..2 {
            let m = xs.iter().map(|x| x[i]).sum::<f64>() / nf;
            assert!((m - mean[i]).abs() <= 3.0 * (cov[(i, i)] / nf).sqrt());
            for j in 0..2 {
                let terms: Vec<f64> = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).collect();
                let c = terms.iter().sum::<f64>() / nf;
                let var = terms.iter().map(|t| (t - c).powi(2)).sum::<f64>() / (nf - 1.0);
                assert!((c - cov[(i, j)]).abs() <= 3.0 * (var / nf).sqrt(), "({i},{j}) {c}");
            }
        }
    }
}
