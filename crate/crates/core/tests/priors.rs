//! Prior families and evidence against dense Gaussian oracles.

mod common;

use std::sync::Arc;

use common::{mvn_logpdf, rel_err, to_na};
use ctdesign::operator::{DenseOperator, LinearOperator, SubsetOperator};
use ctdesign::prior::{
    fit_hyperparameters, log_evidence, log_evidence_dense, FitOptions, IsotropicPrior, Matern12Prior,
    NoiseModel, PriorCovariance, PriorFamily,
};
use ctdesign::rng;
use ctdesign::tomo::{build_geometry, AngleSubset, TomoOperator};
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, 5);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

#[test]
fn evidence_matches_dense_mvn_density() {
    for case in 0..10u64 {
        let mut r = rng::stream(case, 1);
        let n = r.random_range(2..6usize);
        let (h, w) = (n, n + 1);
        let m = r.random_range(1..12usize);
        let a = random_matrix(m, h * w, 100 + case);
        let noise = NoiseModel::new(r.random_range(0.01..1.0)).unwrap();
        let prior: Box<dyn PriorCovariance> = if case % 2 == 0 {
            Box::new(IsotropicPrior::new(h * w, r.random_range(0.1..3.0)).unwrap())
        } else {
            Box::new(Matern12Prior::new(h, w, r.random_range(0.1..3.0), r.random_range(0.3..5.0)).unwrap())
        };
        let y: Vec<f64> = (0..m).map(|_| r.random_range(-2.0..2.0)).collect();
        let op = DenseOperator(a.clone());
        let value = log_evidence(prior.as_ref(), noise, &op, &y).unwrap();

        let sxx = to_na(&prior.matvec_rows(Array2::eye(h * w).view()).unwrap());
        let an = to_na(&a);
        let s = &an * sxx * an.transpose() + DMatrix::identity(m, m) * noise.variance;
        let oracle = mvn_logpdf(&s, &y);
        assert!((value - oracle).abs() < 1e-8, "case {case}: {value} vs {oracle}");
    }
}

#[test]
fn matvec_matches_dense_for_both_families() {
    for (h, w) in [(16, 16), (9, 13)] {
        let iso = IsotropicPrior::new(h * w, 0.7).unwrap();
        let mat = Matern12Prior::new(h, w, 1.3, 4.0).unwrap();
        let v = random_matrix(3, h * w, 8);
        for prior in [&iso as &dyn PriorCovariance, &mat] {
            let dense = to_na(&prior.matvec_rows(Array2::eye(h * w).view()).unwrap());
            let got = to_na(&prior.matvec_rows(v.view()).unwrap());
            let want = to_na(&v) * &dense;
            assert!(rel_err(&got, &want) < 1e-8, "{}", prior.family());
        }
        let want = to_na(&mat.dense());
        let got = to_na(&mat.matvec_rows(Array2::eye(h * w).view()).unwrap());
        assert!(rel_err(&got, &want) < 1e-8);
    }
}

#[test]
fn prior_samples_have_the_prior_covariance() {
    let (h, w) = (6, 5);
    let prior = Matern12Prior::new(h, w, 1.0, 2.0).unwrap();
    let mut r = rng::stream(4, 0);
    let k = 100_000;
    let x = prior.sample(&mut r, k).unwrap();
    let emp = to_na(&x.t().dot(&x)) / k as f64;
    assert!(rel_err(&emp, &to_na(&prior.dense())) < 0.05);
}

#[test]
fn evidence_is_permutation_invariant() {
    let op = TomoOperator::new(build_geometry(8, 8, 6, 13).unwrap());
    let prior = Matern12Prior::new(8, 8, 0.5, 3.0).unwrap();
    let noise = NoiseModel::new(0.05).unwrap();
    let a = AngleSubset::new(vec![0, 2, 5], 6).unwrap();
    let b = AngleSubset::new(vec![5, 0, 2], 6).unwrap();
    let mut r = rng::stream(2, 2);
    let ya: Vec<f64> = (0..39).map(|_| r.random_range(-1.0..1.0)).collect();
    // Same readings, listed in b's angle order.
    let yb: Vec<f64> = [&ya[26..39], &ya[0..13], &ya[13..26]].concat();
    let ea = log_evidence(&prior, noise, &SubsetOperator::new(&op, &a), &ya).unwrap();
    let eb = log_evidence(&prior, noise, &SubsetOperator::new(&op, &b), &yb).unwrap();
    assert!((ea - eb).abs() < 1e-9);
}

#[test]
fn fitting_never_lowers_the_evidence() {
    let op = TomoOperator::new(build_geometry(10, 10, 8, 15).unwrap());
    let pilot = AngleSubset::new(vec![0, 2, 4, 6], 8).unwrap();
    let sub = SubsetOperator::new(&op, &pilot);
    let truth = Matern12Prior::new(10, 10, 0.3, 3.0).unwrap();
    let mut r = rng::stream(11, 0);
    let x = truth.sample(&mut r, 1).unwrap();
    let mut y = sub.forward(x.as_slice().unwrap()).unwrap();
    for v in &mut y {
        *v += 0.1 * r.random_range(-1.0..1.0);
    }
    for family in [PriorFamily::Isotropic, PriorFamily::Matern12] {
        let fit = fit_hyperparameters(family, &sub, &y, 10, 10, &FitOptions::default()).unwrap();
        assert!(fit.report.log_evidence >= fit.report.initial_log_evidence);
        assert!(fit.report.trace.windows(2).all(|w| w[1] >= w[0]));
        let check = log_evidence(fit.prior.as_ref(), fit.noise, &sub, &y).unwrap();
        assert!((check - fit.report.log_evidence).abs() < 1e-6 * check.abs().max(1.0));
    }
}

#[test]
fn dense_evidence_rejects_length_mismatch() {
    let c = Array2::eye(3);
    assert!(log_evidence_dense(c.view(), 0.1, &[1.0, 2.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quadratic_form_is_nonnegative(seed in 0u64..1000, l in 0.2f64..20.0, var in 0.01f64..5.0) {
        let prior: Arc<dyn PriorCovariance> = Arc::new(Matern12Prior::new(9, 7, var, l).unwrap());
        let v = random_matrix(100, 63, seed);
        let sv = prior.matvec_rows(v.view()).unwrap();
        for (a, b) in v.outer_iter().zip(sv.outer_iter()) {
            prop_assert!(a.dot(&b) >= -1e-10);
        }
    }

    #[test]
    fn matvec_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0) {
        let prior = Matern12Prior::new(8, 8, 1.0, 2.5).unwrap();
        let v = random_matrix(2, 64, seed);
        let combo = &v.row(0) * alpha + &v.row(1);
        let s = prior.matvec_rows(v.view()).unwrap();
        let sc = prior.matvec(combo.as_slice().unwrap()).unwrap();
        for i in 0..64 {
            prop_assert!((sc[i] - (alpha * s[[0, i]] + s[[1, i]])).abs() < 1e-10);
        }
    }
}
