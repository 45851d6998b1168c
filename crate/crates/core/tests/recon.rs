//! TV reconstruction properties and PSNR table I/O.

use ctdesign::operator::{Identity, SubsetOperator};
use ctdesign::phantom::{sample_phantom, simulate_measurements, PhantomSpec};
use ctdesign::recon::{
    psnr, read_psnr_csv, tv_objective, tv_reconstruct, tv_value, write_psnr_csv, PsnrRow, ReconConfig,
    TvSolver, DATA_RANGE,
};
use ctdesign::tomo::{build_geometry, default_detector_count, AngleSubset, TomoOperator};
use ctdesign::{rng, Image};
use proptest::prelude::*;
use rand::Rng as _;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, 6);
    Image::new(h, w, (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_absolutely_homogeneous(seed in 0u64..10_000, k in -6i32..6, negative: bool, h in 1usize..9, w in 1usize..9) {
        // Power-of-two scales keep the comparison exact in floating point.
        let alpha = if negative { -(2f64.powi(k)) } else { 2f64.powi(k) };
        let x = random_image(h, w, seed);
        let scaled = Image::new(h, w, x.data().iter().map(|v| alpha * v).collect()).unwrap();
        prop_assert_eq!(tv_value(&scaled), alpha.abs() * tv_value(&x));
    }

    #[test]
    fn tv_is_shift_invariant(seed in 0u64..10_000, c in -4.0f64..4.0, h in 1usize..9, w in 1usize..9) {
        let x = random_image(h, w, seed);
        let shifted = Image::new(h, w, x.data().iter().map(|v| v + c).collect()).unwrap();
        let (a, b) = (tv_value(&shifted), tv_value(&x));
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }
}

#[test]
fn constant_shift_of_dyadic_image_is_exact() {
    let x = Image::new(2, 3, vec![0.5, 0.25, 1.0, 0.75, 0.125, 0.0]).unwrap();
    let shifted = Image::new(2, 3, x.data().iter().map(|v| v + 2.0).collect()).unwrap();
    assert_eq!(tv_value(&shifted), tv_value(&x));
}

#[test]
fn zero_lambda_identity_recovers_data() {
    let y: Vec<f64> = (0..48).map(|i| (0.37 * i as f64).cos()).collect();
    let cfg = ReconConfig {
        lambda: 0.0,
        iterations: 500,
        ..Default::default()
    };
    let rep = tv_reconstruct(&Identity(48), &y, 6, 8, &cfg, None).unwrap();
    for (a, b) in rep.image.data().iter().zip(&y) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn objective_never_increases_on_tomography() {
    let (h, w) = (24, 24);
    let op = TomoOperator::new(build_geometry(h, w, 30, default_detector_count(h, w)).unwrap());
    let spec = PhantomSpec {
        height: h,
        width: w,
        ..Default::default()
    };
    for seed in 0..4u64 {
        let x = sample_phantom(&spec, seed).unwrap();
        let angles = AngleSubset::new(vec![0, 7, 15, 22], 30).unwrap();
        let y = simulate_measurements(&op, x.image.data(), &angles, 0.05, seed + 50, false).unwrap().y;
        let sub = SubsetOperator::new(&op, &angles);
        for solver in [TvSolver::PrimalDual, TvSolver::Adam] {
            let cfg = ReconConfig {
                lambda: 0.5,
                iterations: 300,
                solver,
                learning_rate: 1e-2,
                ..Default::default()
            };
            let rep = tv_reconstruct(&sub, &y, h, w, &cfg, Some(&x.image)).unwrap();
            let final_value = tv_objective(&sub, &y, &rep.image, 0.5).unwrap();
            let zero_value = tv_objective(&sub, &y, &Image::zeros(h, w), 0.5).unwrap();
            assert!(final_value <= rep.objective_trace[0].1, "seed {seed} {solver:?}");
            assert!(final_value <= zero_value);
            assert!(rep.psnr.unwrap().is_finite());
        }
    }
}

#[test]
fn psnr_of_constant_offset() {
    let truth = Image::zeros(4, 4);
    let x = Image::new(4, 4, vec![0.1; 16]).unwrap();
    assert!((psnr(&x, &truth, DATA_RANGE).unwrap() - 20.0).abs() < 1e-12);
}

#[test]
fn psnr_table_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("psnr.csv");
    let rows = vec![
        PsnrRow {
            image: 0,
            method: "lindip-gprior".into(),
            objective: "ese".into(),
            recon: "tv".into(),
            angles: 10,
            psnr: Some(31.25),
            status: "ok".into(),
        },
        PsnrRow {
            image: 3,
            method: "equidistant".into(),
            objective: "none".into(),
            recon: "dip".into(),
            angles: 5,
            psnr: None,
            status: "skipped".into(),
        },
    ];
    write_psnr_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("image,method,objective,recon,angles,psnr_db,status\n"));
    assert_eq!(read_psnr_csv(&path).unwrap(), rows);
}
