//! Runs the full protocol (data, pilot fits, designs, reconstructions,
//! summary) from a TOML config.
//!
//! ```text
//! cargo run --release --example experiment -- configs/small.toml
//! ```

use ctdesign::experiment::{run_experiment, ExperimentConfig};

fn main() -> ctdesign::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/small.toml".into());
    let cfg = ExperimentConfig::load(path.as_ref())?;
    let out = run_experiment(&cfg)?;
    println!("{} cells, {} failures, results in {}", out.records.len(), out.failures, cfg.out_dir.display());
    for row in &out.summary {
        println!(
            "{:14} {:4} {:3} {:3} angles: {:6.2} ± {:.2} dB (n = {})",
            row.method, row.objective, row.recon, row.angles, row.mean_psnr, row.std_error, row.n
        );
    }
    Ok(())
}
