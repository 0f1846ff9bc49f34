//! Problem generators, experiment orchestration and CSV output.

mod kernels;
mod runner;
mod setup;

pub use kernels::{build_kernel_matrix, chebyshev_design, sample_gaussian, KernelFamily, KernelSpec};
pub use runner::{
    laplace_per_realization, lognormal_problem, map_errors_csv, map_errors_path, results_csv, rows_for, run_experiment,
    thread_pool, write_output, ExperimentOutput, MapErrorRow, ResultRow, MAP_ERRORS_HEADER, RESULTS_HEADER, THREADS_ENV,
};
pub use setup::{
    regression_prior_mean, setup_clustering, setup_lognormal2d, setup_regression1d, stream_rng, ExperimentConfig,
    ExperimentKind, KernelParams, LinearSetup, LognormalSetup,
};
