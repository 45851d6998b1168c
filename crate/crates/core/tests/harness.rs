//! End-to-end runs of the experiment harness on a tiny problem.

use std::path::Path;
use std::process::Command;

use ctdesign::design::Objective;
use ctdesign::experiment::{
    emit_diagnostics, gen_data, read_design_sets, run_experiment, ExperimentConfig, Method,
};
use ctdesign::neural::{NetworkSpec, TrainConfig};
use ctdesign::recon::{read_psnr_csv, ScheduleEntry};

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        height: 12,
        width: 12,
        n_candidates: 18,
        pilot: 3,
        steps: 4,
        cadence: 2,
        n_images: 2,
        k: 200,
        k_network: 64,
        retrain_every: 2,
        retrain_iterations: 10,
        out_dir: out.to_path_buf(),
        tv_schedule: vec![ScheduleEntry {
            max_angles: usize::MAX,
            lambda: 0.5,
            iterations: 200,
        }],
        network: NetworkSpec {
            channels: 3,
            ..Default::default()
        },
        pilot_training: TrainConfig {
            lambda: 0.1,
            iterations: 30,
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    }
    .resolved()
    .unwrap()
}

#[test]
fn equidistant_without_steps_evaluates_only_the_pilot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::Equidistant],
        steps: 0,
        ..tiny(dir.path())
    }
    .resolved()
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.failures, 0);
    let rows = read_psnr_csv(&dir.path().join("psnr.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().all(|r| r.angles == 3 && r.method == "equidistant"));
    let tv: Vec<_> = rows.iter().filter(|r| r.recon == "tv").collect();
    assert!(tv.iter().all(|r| r.psnr.is_some() && r.status == "ok"));
    let dip: Vec<_> = rows.iter().filter(|r| r.recon == "dip").collect();
    assert!(dip.iter().all(|r| r.psnr.is_none() && r.status == "skipped"));
    // Skipped reconstructions do not form a curve.
    assert_eq!(out.summary.len(), 1);
    assert_eq!(out.summary[0].n, 2);
}

#[test]
fn full_grid_is_deterministic_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = ExperimentConfig {
        threads: 1,
        ..tiny(a.path())
    };
    let cfg_b = ExperimentConfig {
        threads: 2,
        ..tiny(b.path())
    };
    let out = run_experiment(&cfg_a).unwrap();
    run_experiment(&cfg_b).unwrap();
    for file in ["summary.csv", "psnr.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between runs");
    }

    // One curve per method × objective, at every evaluation point, for both
    // reconstructions, with a PSNR or an explicit marker.
    assert_eq!(out.failures, 0, "{:?}", out.records.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>());
    let cells = cfg_a.cells();
    assert_eq!(cells.len(), 5 * 2 + 2);
    assert_eq!(out.rows.len(), 2 * cells.len() * cfg_a.evaluation_points().len() * 2);
    for r in &out.rows {
        assert!(r.psnr.is_some() == (r.status == "ok"), "{r:?}");
        assert!(r.status == "ok" || r.status == "skipped");
    }
    let tv_curves: Vec<_> = out.summary.iter().filter(|s| s.recon == "tv").collect();
    assert_eq!(tv_curves.len(), cells.len() * 3);

    // Every sequential design starts with the pilot and keeps its own order.
    let designs = a.path().join("designs");
    for r in &out.records {
        let sets = read_design_sets(&designs, r.image, r.method, r.objective_name(), 18).unwrap();
        assert_eq!(sets.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 5, 7]);
        if !matches!(r.method, Method::Equidistant) {
            assert_eq!(&sets[2].indices()[..3], &[0, 6, 12]);
        }
        let manifest = designs.join(format!("image{:03}_{}_{}_manifest.toml", r.image, r.method, r.objective_name()));
        assert!(manifest.exists());
    }
    assert!(a.path().join("config.toml").exists());
    assert!(a.path().join("fits/image000_fits.toml").exists());
}

#[test]
fn score_history_has_one_row_per_remaining_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::Isotropic],
        objectives: vec![Objective::Ese],
        n_images: 1,
        ..tiny(dir.path())
    };
    run_experiment(&cfg).unwrap();
    let path = dir.path().join("designs/image000_isotropic_ese_scores.csv");
    let text = std::fs::read_to_string(path).unwrap();
    let rows = text.lines().count() - 1;
    // Step t scores the 18 − (3 + t − 1) unchosen candidates.
    let expected: usize = (1..=4).map(|t| 18 - (3 + t - 1)).sum();
    assert_eq!(rows, expected);
}

#[test]
fn empty_history_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    emit_diagnostics(&path, &[], &[0.0, 90.0]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().trim_end(), "step,angle_index,angle_deg,score");
}

#[test]
fn data_generation_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(gen_data(&cfg).unwrap(), 0);
    let (img, header) = ctdesign::io::read_raw(&dir.path().join("data/image001_phantom.f64")).unwrap();
    assert_eq!(img.len(), 144);
    assert_eq!(header.get("height").and_then(|v| v.as_integer()), Some(12));
    let (sino, _) = ctdesign::io::read_raw(&dir.path().join("data/image001_sinogram.f64")).unwrap();
    assert_eq!(sino.len(), 18 * cfg.detector_count);
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

#[test]
fn invalid_configs_are_config_errors() {
    let base = ExperimentConfig::default();
    for bad in [
        ExperimentConfig { cadence: 4, ..base.clone() },
        ExperimentConfig { pilot: 0, ..base.clone() },
        ExperimentConfig { steps: 99, ..base.clone() },
        ExperimentConfig { methods: vec![Method::Random, Method::Random], ..base.clone() },
        ExperimentConfig { noise_pct: -0.1, ..base.clone() },
    ] {
        assert!(matches!(bad.resolved(), Err(ctdesign::Error::Config { .. })));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "height = 16\nno_such_key = 1\n").unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(ctdesign::Error::Config { .. })));
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}

fn cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ctdesign"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::Equidistant, Method::Random],
        steps: 2,
        ..tiny(&dir.path().join("run"))
    }
    .resolved()
    .unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let p = path.to_str().unwrap();

    let missing = dir.path().join("missing.toml");
    assert_eq!(cli(&["fit", missing.to_str().unwrap()]), 1);
    assert_eq!(cli(&["design", p, "--noise", "-1"]), 1);
    assert_eq!(cli(&["design", p, "--method", "bogus"]), 1);
    assert_eq!(cli(&["frobnicate", p]), 1);

    // Reconstructing before any design exists records failures.
    assert_eq!(cli(&["reconstruct", p]), 2);

    for stage in ["gen-data", "design", "reconstruct", "report"] {
        assert_eq!(cli(&[stage, p, "--seed", "3"]), 0, "{stage}");
    }
    let staged = std::fs::read(dir.path().join("run/summary.csv")).unwrap();
    let out2 = dir.path().join("run2");
    assert_eq!(cli(&["evaluate", p, "--seed", "3", "--out", out2.to_str().unwrap()]), 0);
    assert_eq!(std::fs::read(out2.join("summary.csv")).unwrap(), staged);
    assert_eq!(cli(&["evaluate", p, "--method", "random", "--objective", "ese", "--out", out2.to_str().unwrap()]), 0);
}
