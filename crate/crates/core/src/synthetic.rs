//! Seeded random instances for tests, benchmarks and property checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::SpdMatrix;
use crate::model::{GaussianDist, LinearGaussianModel};

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
}

/// `M Mᵀ / dim + shift · I`
pub fn random_spd<R: Rng>(rng: &mut R, dim: usize, shift: f64) -> SpdMatrix {
    let m = random_matrix(rng, dim, dim);
    let a = &m * m.transpose() / dim as f64 + DMatrix::identity(dim, dim) * shift;
    SpdMatrix::new(a).expect("shifted Gram matrix is SPD")
}

/// Well-conditioned random invertible matrix (identity plus a bounded perturbation).
pub fn random_invertible<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let p = random_matrix(rng, dim, dim) * (0.5 / dim as f64);
    let scale = DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| {
        let s: f64 = rng.random_range(0.5..2.0);
        if rng.random_bool(0.5) {
            s
        } else {
            -s
        }
    }));
    (DMatrix::identity(dim, dim) + p) * scale
}

/// Random `Y = B X + E` with dense SPD prior and noise covariances.
pub fn random_linear_model<R: Rng>(rng: &mut R, n: usize, q: usize, centered: bool) -> LinearGaussianModel {
    let design = random_matrix(rng, n, q);
    let (prior_mean, noise_mean) = if centered {
        (DVector::zeros(q), DVector::zeros(n))
    } else {
        (random_vector(rng, q), random_vector(rng, n))
    };
    let prior = GaussianDist::new(prior_mean, random_spd(rng, q, 0.5)).expect("dims agree");
    let noise = GaussianDist::new(noise_mean, random_spd(rng, n, 0.2)).expect("dims agree");
    LinearGaussianModel::new(design, prior, noise).expect("dims agree")
}
