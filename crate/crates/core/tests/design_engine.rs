//! Design engine against dense posterior computations.

use std::sync::Arc;

use ctdesign::design::{
    estimate_block, init_state, matheron_samples, run_design, score_candidates, update_state,
    BlockEstimator, DesignConfig, JitterPolicy, Objective,
};
use ctdesign::prior::{IsotropicPrior, Matern12Prior, PriorCovariance};
use ctdesign::rng::Rng;
use ctdesign::tomo::{build_geometry, default_detector_count, AngleSubset, TomoOperator};
use ctdesign::Result;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

struct ZeroPrior(usize);

impl PriorCovariance for ZeroPrior {
    fn dim(&self) -> usize {
        self.0
    }
    fn matvec_rows(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros(vs.raw_dim()))
    }
    fn sample(&self, _: &mut Rng, k: usize) -> Result<Array2<f64>> {
        Ok(Array2::zeros((k, self.0)))
    }
    fn hyperparameters(&self) -> Vec<(String, f64)> {
        vec![]
    }
    fn family(&self) -> &'static str {
        "zero"
    }
}

fn operator(n: usize, angles: usize) -> Arc<TomoOperator> {
    Arc::new(TomoOperator::new(build_geometry(n, n, angles, default_detector_count(n, n)).unwrap()))
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn subset(idx: &[usize], n: usize) -> AngleSubset {
    AngleSubset::new(idx.to_vec(), n).unwrap()
}

/// Dense posterior covariance of the image given the `used` angles.
fn dense_posterior(op: &TomoOperator, prior: &dyn PriorCovariance, used: &AngleSubset, sigma2: f64) -> DMatrix<f64> {
    let d = op.geometry().pixel_count();
    let s = to_na(&prior.matvec_rows(Array2::eye(d).view()).unwrap());
    let a = to_na(&op.rows_dense(used).unwrap());
    let syy = &a * &s * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * sigma2;
    let sa = &s * a.transpose();
    &s - &sa * syy.cholesky().unwrap().solve(&sa.transpose())
}

#[test]
fn factor_reproduces_dense_sigma_yy() {
    let op = operator(10, 12);
    let prior: Arc<dyn PriorCovariance> = Arc::new(Matern12Prior::new(10, 10, 0.5, 2.0).unwrap());
    let pilot = subset(&[0, 3, 7], 12);
    let state = init_state(prior.clone(), 0.01, op.clone(), pilot.clone(), None, JitterPolicy::none()).unwrap();
    let a = to_na(&op.rows_dense(&pilot).unwrap());
    let s = to_na(&prior.matvec_rows(Array2::eye(100).view()).unwrap());
    let dense = &a * s * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * 0.01;
    let llt = to_na(&state.factor().reconstruct());
    assert!((&llt - &dense).norm() / dense.norm() < 1e-10);
}

#[test]
fn pilot_order_permutes_sigma_yy() {
    let op = operator(8, 9);
    let prior: Arc<dyn PriorCovariance> = Arc::new(IsotropicPrior::new(64, 1.0).unwrap());
    let a = init_state(prior.clone(), 0.1, op.clone(), subset(&[1, 4, 6], 9), None, JitterPolicy::none()).unwrap();
    let b = init_state(prior, 0.1, op, subset(&[6, 1, 4], 9), None, JitterPolicy::none()).unwrap();
    let mut ea: Vec<f64> = to_na(&a.sigma_yy().to_owned()).symmetric_eigenvalues().iter().copied().collect();
    let mut eb: Vec<f64> = to_na(&b.sigma_yy().to_owned()).symmetric_eigenvalues().iter().copied().collect();
    ea.sort_by(f64::total_cmp);
    eb.sort_by(f64::total_cmp);
    for (x, y) in ea.iter().zip(&eb) {
        assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
    }
}

#[test]
fn zero_prior_gives_zero_samples() {
    let op = operator(6, 8);
    let state = init_state(Arc::new(ZeroPrior(36)), 0.3, op, subset(&[0, 4], 8), None, JitterPolicy::none()).unwrap();
    let batch = matheron_samples(&state, 20, 1).unwrap();
    assert!(batch.samples.iter().all(|&v| v == 0.0));
    let block = estimate_block(&batch, 3).unwrap();
    assert!(block.iter().all(|&v| v == 0.0));
}

#[test]
fn sample_mean_shrinks_and_blocks_are_symmetric() {
    let op = operator(8, 10);
    let prior = Arc::new(IsotropicPrior::new(64, 1.0).unwrap());
    let state = init_state(prior, 0.05, op, subset(&[0, 5], 10), None, JitterPolicy::none()).unwrap();
    let k = 40_000;
    let batch = matheron_samples(&state, k, 7).unwrap();
    let mean = batch.samples.mean_axis(ndarray::Axis(0)).unwrap();
    let var_total: f64 = batch.samples.mapv(|v| v * v).mean_axis(ndarray::Axis(0)).unwrap().sum();
    let se = (var_total / k as f64).sqrt();
    assert!(mean.mapv(|v| v * v).sum().sqrt() < 4.0 * se);

    for &a in &batch.angles {
        let b = estimate_block(&batch, a).unwrap();
        assert_eq!(b, b.t());
        // Trace of the estimate equals the mean squared chunk norm.
        let chunk = batch.chunk(a).unwrap();
        let msq = chunk.mapv(|v| v * v).sum() / k as f64;
        assert!((b.diag().sum() - msq).abs() <= 1e-12 * msq);
    }
}

#[test]
fn estimator_error_decreases_with_k() {
    let op = operator(8, 6);
    let prior: Arc<dyn PriorCovariance> = Arc::new(IsotropicPrior::new(64, 1.0).unwrap());
    let used = subset(&[0, 3], 6);
    let state = init_state(prior.clone(), 0.05, op.clone(), used.clone(), None, JitterPolicy::none()).unwrap();
    let post = dense_posterior(&op, prior.as_ref(), &used, 0.05);
    let ab = to_na(&op.rows_dense(&subset(&[1], 6)).unwrap());
    let exact = &ab * post * ab.transpose();
    let mut errors = Vec::new();
    for k in [100, 1000, 10_000] {
        let mean_err: f64 = (0..10)
            .map(|rep| {
                let batch = matheron_samples(&state, k, 100 + rep).unwrap();
                (to_na(&estimate_block(&batch, 1).unwrap()) - &exact).norm() / exact.norm()
            })
            .sum::<f64>()
            / 10.0;
        errors.push(mean_err);
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}

#[test]
fn conditioning_never_increases_posterior_logdet() {
    let op = operator(8, 10);
    let prior: Arc<dyn PriorCovariance> = Arc::new(Matern12Prior::new(8, 8, 1.0, 3.0).unwrap());
    let mut state = init_state(prior.clone(), 0.02, op.clone(), subset(&[0], 10), None, JitterPolicy::none()).unwrap();
    let mut prev = dense_posterior(&op, prior.as_ref(), state.chosen(), 0.02).determinant().ln();
    for angle in [5, 2, 8, 7] {
        update_state(&mut state, angle, None).unwrap();
        let cur = dense_posterior(&op, prior.as_ref(), state.chosen(), 0.02).determinant().ln();
        assert!(cur <= prev + 1e-8, "{cur} > {prev}");
        prev = cur;
    }
}

#[test]
fn zero_steps_keep_the_pilot() {
    let op = operator(6, 8);
    let prior = Arc::new(IsotropicPrior::new(36, 1.0).unwrap());
    let pilot = subset(&[0, 4], 8);
    let mut state = init_state(prior, 0.1, op, pilot.clone(), None, JitterPolicy::default()).unwrap();
    let cfg = DesignConfig {
        steps: 0,
        ..Default::default()
    };
    let run = run_design(&mut state, &cfg, &|_| Ok(None), None).unwrap();
    assert_eq!(run.chosen, pilot);
    assert!(run.selected().is_empty());
}

#[test]
fn exact_and_monte_carlo_scores_agree_roughly() {
    let op = operator(8, 8);
    let prior = Arc::new(IsotropicPrior::new(64, 1.0).unwrap());
    let state = init_state(prior, 0.05, op, subset(&[0, 4], 8), None, JitterPolicy::none()).unwrap();
    let exact = score_candidates(&state, Objective::Ese, BlockEstimator::Exact, 0, 0).unwrap();
    let mc = score_candidates(&state, Objective::Ese, BlockEstimator::MonteCarlo, 20_000, 3).unwrap();
    assert_eq!(exact.angles, mc.angles);
    for (e, m) in exact.values.iter().zip(&mc.values) {
        assert!((e - m).abs() < 0.05 * e, "{e} vs {m}");
    }
}

#[test]
fn isotropic_scores_dip_around_the_measured_angle() {
    let op = operator(64, 100);
    let prior = Arc::new(IsotropicPrior::new(64 * 64, 1.0).unwrap());
    let state = init_state(prior, 0.01, op, subset(&[25], 100), None, JitterPolicy::none()).unwrap();
    let scores = score_candidates(&state, Objective::Ese, BlockEstimator::Exact, 0, 0).unwrap();
    let score = |a: usize| scores.values[scores.angles.iter().position(|&x| x == a).unwrap()];
    // Reference level: the median score.
    let mut sorted = scores.values.clone();
    sorted.sort_by(f64::total_cmp);
    let level = sorted[sorted.len() / 2];
    let half = 0.5 * (level + score(24));
    let below = |a: usize| score(a) < half;
    let left = (1..25).take_while(|&d| below(25 - d)).count();
    let right = (1..25).take_while(|&d| below(25 + d)).count();
    assert_eq!(left, right, "symmetric around the measured angle");
    // Angles between the flanks, including the measured one.
    let width_deg = 1.8 * (left + right + 1) as f64;
    assert!(width_deg >= 3.0 && width_deg <= 20.0, "{width_deg}");
}
