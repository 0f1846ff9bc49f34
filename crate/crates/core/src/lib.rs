//! Optimal low-dimensional projections of observations for Bayesian inference
//! in linear Gaussian (and approximately Gaussian nonlinear) models.

pub mod error;
pub mod experiments;
pub mod grassmann;
pub mod information;
pub mod linalg;
pub mod model;
pub mod nonlinear;
pub mod reducers;
pub mod synthetic;

pub use error::{Error, Result};
pub use grassmann::{GrassmannPoint, SolverTrace, TrustRegionConfig};
pub use information::InfoScores;
pub use linalg::{EigenPairs, SpdMatrix};
pub use reducers::{ReductionMethod, ReductionReport};
pub use model::{AffinePosteriorMap, GaussianDist, GaussianProblem, LinearGaussianModel, ModelMoments, SubspaceBasis};
