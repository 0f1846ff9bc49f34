use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bayes_reduce::experiments::{build_kernel_matrix, KernelFamily, KernelSpec};
use bayes_reduce::grassmann::{project_tangent, retract_qr, trust_region_solve, GrassmannPoint, TrustRegionConfig};
use bayes_reduce::information::{
    ekld_cost, full_mutual_information, kl_gaussian, kld_cost, mutual_information, EkldObjective, KldObjective,
};
use bayes_reduce::linalg::{cholesky, gen_eig_spd, sym_eig};
use bayes_reduce::model::{GaussianProblem, SubspaceBasis};
use bayes_reduce::nonlinear::{map_errors, ForwardModel, LaplaceApprox, LogPosterior, LognormalForward};
use bayes_reduce::reducers::{reduce, reduce_mi, ReduceInputs, ReductionMethod};
use bayes_reduce::synthetic::{random_invertible, random_linear_model, random_matrix, random_spd, random_vector};
use bayes_reduce::GaussianDist;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn problem(rng: &mut ChaCha8Rng, n: usize, q: usize) -> GaussianProblem {
    random_linear_model(rng, n, q, false).problem().unwrap()
}

fn basis(rng: &mut ChaCha8Rng, n: usize, r: usize) -> SubspaceBasis {
    SubspaceBasis::new(random_matrix(rng, n, r)).unwrap()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + b.norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cholesky_reconstructs(seed in any::<u64>(), dim in 2usize..=20) {
        let m = random_spd(&mut rng(seed), dim, 0.1);
        let l = cholesky(m.matrix()).unwrap();
        prop_assert!((&l * l.transpose() - m.matrix()).norm() <= 1e-10 * m.matrix().norm());
        prop_assert!((0..dim).all(|i| l[(i, i)] > 0.0));
    }

    #[test]
    fn symmetric_eigen_residuals(seed in any::<u64>(), dim in 2usize..=20) {
        let mut g = rng(seed);
        let a = random_matrix(&mut g, dim, dim);
        let m = &a + a.transpose();
        let e = sym_eig(&m).unwrap();
        let scale = m.norm();
        prop_assert!(e.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((&m * &e.vectors - &e.vectors * DMatrix::from_diagonal(&e.values)).norm() <= 1e-9 * scale);
        prop_assert!(close(&(e.vectors.transpose() * &e.vectors), &DMatrix::identity(dim, dim), 1e-10));
    }

    #[test]
    fn generalized_eigen_orthonormal_and_shifted(seed in any::<u64>(), dim in 2usize..=20, rank in 1usize..=20) {
        let mut g = rng(seed);
        let f = random_matrix(&mut g, dim, rank.min(dim));
        let a = &f * f.transpose();
        let b = random_spd(&mut g, dim, 0.5);
        let e = gen_eig_spd(&a, &b).unwrap();
        let vbv = e.vectors.transpose() * b.matrix() * &e.vectors;
        prop_assert!((vbv - DMatrix::identity(dim, dim)).amax() <= 1e-10);
        let resid = &a * &e.vectors - b.matrix() * &e.vectors * DMatrix::from_diagonal(&e.values);
        prop_assert!(resid.norm() <= 1e-8 * (a.norm() + b.matrix().norm()));
        let shifted = gen_eig_spd(&(&a + b.matrix()), &b).unwrap();
        for (s, v) in shifted.values.iter().zip(e.values.iter()) {
            prop_assert!((s - v - 1.0).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn posteriors_are_invariant_and_ordered(seed in any::<u64>(), n in 2usize..=15, q in 1usize..=8, r in 1usize..=15) {
        let mut g = rng(seed);
        let q = q.min(n);
        let r = r.min(n);
        let p = problem(&mut g, n, q);
        let y = random_vector(&mut g, n) * 2.0;
        let v = basis(&mut g, n, r);
        let (full, _) = p.posterior_full(&y).unwrap();
        let (red, _) = p.posterior_reduced(&v, &y).unwrap();
        prop_assert!(red.cov.matrix().trace() >= full.cov.matrix().trace() - 1e-10);
        for _ in 0..3 {
            let w = SubspaceBasis::new(v.matrix() * random_invertible(&mut g, r)).unwrap();
            let (moved, _) = p.posterior_reduced(&w, &y).unwrap();
            prop_assert!((&moved.mean - &red.mean).norm() <= 1e-9 * (1.0 + red.mean.norm()));
            prop_assert!(close(moved.cov.matrix(), red.cov.matrix(), 1e-9));
        }
        let square = SubspaceBasis::new(random_invertible(&mut g, n)).unwrap();
        let (same, _) = p.posterior_reduced(&square, &y).unwrap();
        prop_assert!((&same.mean - &full.mean).norm() <= 1e-8 * (1.0 + full.mean.norm()));
        prop_assert!(close(same.cov.matrix(), full.cov.matrix(), 1e-8));
    }

    #[test]
    fn information_costs_are_nonnegative_invariant_and_bounded(
        seed in any::<u64>(), n in 2usize..=15, q in 1usize..=8, r in 1usize..=14,
    ) {
        let mut g = rng(seed);
        let q = q.min(n);
        let r = r.min(n - 1);
        let p = problem(&mut g, n, q);
        let y = random_vector(&mut g, n) * 2.0;
        let v = basis(&mut g, n, r);
        let (full, _) = p.posterior_full(&y).unwrap();
        let (red, _) = p.posterior_reduced(&v, &y).unwrap();
        let costs = |b: &SubspaceBasis| [kld_cost(&p, b, &y).unwrap(), ekld_cost(&p, b).unwrap(), mutual_information(&p, b).unwrap()];
        let base = costs(&v);
        prop_assert!(kl_gaussian(&full, &red).unwrap() >= -1e-10);
        prop_assert!(base.iter().all(|c| *c >= -1e-10));
        prop_assert!(base[2] <= full_mutual_information(&p).unwrap() + 1e-9);
        let moved = costs(&SubspaceBasis::new(v.matrix() * random_invertible(&mut g, r)).unwrap());
        for (a, b) in moved.iter().zip(base.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let mut extended = v.matrix().clone().insert_column(r, 0.0);
        extended.set_column(r, &random_vector(&mut g, n));
        let extended = SubspaceBasis::new(extended).unwrap();
        prop_assert!(mutual_information(&p, &extended).unwrap() >= base[2] - 1e-10);
    }

    #[test]
    fn kernel_matrices_are_spd(seed in any::<u64>(), n in 1usize..=40, family in 0usize..4, ell in 0.01f64..2.0) {
        let mut g = rng(seed);
        let locations = DMatrix::from_fn(n, 2, |_, _| g.random_range(-1.0..1.0));
        let family = [KernelFamily::Matern32Indexed, KernelFamily::Exponential, KernelFamily::SquaredExponential, KernelFamily::White][family];
        let spec = KernelSpec::new(family, 0.7, ell, 1e-6);
        prop_assert!(build_kernel_matrix(&spec, &locations).is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tangent_and_retraction_geometry(seed in any::<u64>(), n in 2usize..=20, r in 1usize..=6, t in 0.0f64..5.0) {
        let mut g = rng(seed);
        let r = r.min(n - 1);
        let v = GrassmannPoint::from_span(&random_matrix(&mut g, n, r)).unwrap();
        let d = project_tangent(&v, &random_matrix(&mut g, n, r)).unwrap();
        prop_assert!((v.basis().transpose() * &d.delta).norm() <= 1e-8 * d.norm().max(1e-300));
        let step = bayes_reduce::grassmann::TangentVector { delta: &d.delta * t };
        let moved = retract_qr(&v, &step).unwrap();
        let gram = moved.basis().transpose() * moved.basis();
        prop_assert!((gram - DMatrix::identity(r, r)).norm() <= 1e-10);
    }

    #[test]
    fn accepted_steps_satisfy_ratio_test(seed in any::<u64>(), n in 3usize..=15, q in 1usize..=6, r in 1usize..=4, expected in any::<bool>()) {
        let mut g = rng(seed);
        let q = q.min(n);
        let r = r.min(n - 1);
        let p = problem(&mut g, n, q);
        let start = GrassmannPoint::from_span(&random_matrix(&mut g, n, r)).unwrap();
        let cfg = TrustRegionConfig::default();
        let (_, trace) = if expected {
            trust_region_solve(&EkldObjective::new(&p).unwrap(), &start, &cfg).unwrap()
        } else {
            let y = random_vector(&mut g, n);
            trust_region_solve(&KldObjective::new(&p, &y).unwrap(), &start, &cfg).unwrap()
        };
        for rec in trace.records.iter().filter(|rec| rec.accepted) {
            prop_assert!(rec.rho > cfg.rho_accept);
        }
        let costs: Vec<f64> = trace.records.iter().map(|rec| rec.cost).collect();
        prop_assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0)));
    }

    #[test]
    fn reducers_return_full_rank_bases(seed in any::<u64>(), r in 1usize..=12, method in 0usize..8) {
        let mut g = rng(seed);
        let n = 12;
        let p = problem(&mut g, n, 4);
        let y = random_vector(&mut g, n);
        let locations = DMatrix::from_fn(n, 2, |_, _| g.random_range(0.0..1.0));
        let method = ReductionMethod::ALL[method];
        let inputs = ReduceInputs { y: Some(&y), locations: Some(&locations), seed, ..Default::default() };
        let rep = reduce(&p, method, r, &inputs).unwrap();
        prop_assert_eq!(rep.basis.rank(), r);
        let fresh = bayes_reduce::InfoScores::evaluate(&p, &rep.basis, Some(&y)).unwrap();
        prop_assert_eq!(fresh, rep.scores);
        prop_assert!(rep.spectrum.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mi_reducer_is_nested_monotone(seed in any::<u64>(), n in 2usize..=20, q in 1usize..=10) {
        let mut g = rng(seed);
        let p = problem(&mut g, n, q.min(n));
        let mut last = 0.0;
        for r in 1..=n {
            let mi = reduce_mi(&p, r, None).unwrap().scores.mi;
            prop_assert!(mi >= last - 1e-10);
            last = mi;
        }
    }

    #[test]
    fn lognormal_log_posterior_derivatives(seed in any::<u64>(), n in 1usize..=8, q in 1usize..=4, reduced in any::<bool>()) {
        let mut g = rng(seed);
        let fwd = LognormalForward { design: random_matrix(&mut g, n, q) * 0.4 };
        let prior = GaussianDist::new(DVector::zeros(q), random_spd(&mut g, q, 0.3)).unwrap();
        let noise = GaussianDist::new(DVector::zeros(n), random_spd(&mut g, n, 0.3)).unwrap();
        let y = fwd.eval(&(random_vector(&mut g, q) * 0.5)) + random_vector(&mut g, n) * 0.1;
        let v = basis(&mut g, n, n.div_ceil(2));
        let lp = LogPosterior::new(&fwd, &prior, &noise, &y, reduced.then_some(&v)).unwrap();
        let x = random_vector(&mut g, q) * 0.5;
        let at = lp.evaluate(&x).unwrap();
        let h = 1e-5;
        for i in 0..q {
            let mut e = DVector::zeros(q);
            e[i] = h;
            let fd = (lp.value(&(&x + &e)).unwrap() - lp.value(&(&x - &e)).unwrap()) / (2.0 * h);
            prop_assert!((fd - at.gradient[i]).abs() <= 1e-5 * (1.0 + at.gradient.norm()));
            let col = (lp.evaluate(&(&x + &e)).unwrap().gradient - lp.evaluate(&(&x - &e)).unwrap().gradient) / (2.0 * h);
            prop_assert!((col - at.hessian.column(i)).norm() <= 1e-3 * (1.0 + at.hessian.norm()));
        }
    }

    #[test]
    fn map_errors_are_scale_free(seed in any::<u64>(), q in 1usize..=5, count in 1usize..=6, c in 0.01f64..100.0) {
        let mut g = rng(seed);
        let draw = |g: &mut ChaCha8Rng| {
            LaplaceApprox::from_gaussian(&GaussianDist::new(random_vector(g, q), random_spd(g, q, 0.2)).unwrap()).unwrap()
        };
        let full: Vec<_> = (0..count).map(|_| draw(&mut g)).collect();
        let red: Vec<_> = (0..count).map(|_| draw(&mut g)).collect();
        let scale = |set: &[LaplaceApprox]| -> Vec<LaplaceApprox> {
            set.iter()
                .map(|l| {
                    let cov = bayes_reduce::SpdMatrix::new(l.precision.inverse() * c).unwrap();
                    LaplaceApprox::from_gaussian(&GaussianDist::new(&l.x_map * c, cov).unwrap()).unwrap()
                })
                .collect()
        };
        let base = map_errors(&full, &red).unwrap();
        let scaled = map_errors(&scale(&full), &scale(&red)).unwrap();
        prop_assert!((base.eps - scaled.eps).abs() <= 1e-9 * (1.0 + base.eps));
        prop_assert!((base.eps_h - scaled.eps_h).abs() <= 1e-9 * (1.0 + base.eps_h));
    }
}
