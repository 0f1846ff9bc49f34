//! Fixtures shared by the criterion benchmarks.

use nalgebra::DVector;

use bayes_reduce::experiments::{setup_regression1d, ExperimentConfig, ExperimentKind, KernelParams};
use bayes_reduce::GaussianProblem;

/// Regression problem with `q` parameters and `n` observations, plus its realization.
pub fn regression_fixture(q: usize, n: usize) -> (GaussianProblem, DVector<f64>) {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Regression1d,
        q,
        n,
        kernel: KernelParams::default(),
        methods: vec![bayes_reduce::ReductionMethod::Mi],
        r: vec![1],
        data_seed: 1,
        method_seed: 1,
        n_mc: 1,
        optimizer: Default::default(),
        output: None,
        record_timing: false,
    };
    let setup = setup_regression1d(&cfg).expect("regression fixture");
    (setup.model.problem().expect("regression problem"), setup.y)
}
