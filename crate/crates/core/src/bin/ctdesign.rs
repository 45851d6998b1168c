//! Command-line front end for the experiment pipeline.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 run finished with
//! recorded failures (or aborted after the config was accepted).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctdesign::design::Objective;
use ctdesign::experiment::{self, ExperimentConfig, Method};
use ctdesign::Error;

#[derive(Parser)]
#[command(name = "ctdesign", version, about = "Scan-angle design for sparse-view CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantoms and full-candidate sinograms.
    GenData(Common),
    /// Fit every prior (and the pilot network) to the pilot scan.
    Fit(Common),
    /// Fit and run the designs.
    Design(Common),
    /// Reconstruct the angle sets written by `design`.
    Reconstruct(Common),
    /// Run the whole protocol and write the summary.
    Evaluate(Common),
    /// Summarise an existing psnr.csv.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method list.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Comma-separated objective list.
    #[arg(long, value_delimiter = ',')]
    objective: Vec<Objective>,
    /// Noise level as a fraction, e.g. 0.05.
    #[arg(long, allow_negative_numbers = true)]
    noise: Option<f64>,
}

impl Common {
    fn config(&self) -> ctdesign::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if !self.objective.is_empty() {
            cfg.objectives = self.objective.clone();
        }
        if let Some(n) = self.noise {
            cfg.noise_pct = n;
        }
        cfg.resolved()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let common = match &cli.command {
        Command::GenData(c)
        | Command::Fit(c)
        | Command::Design(c)
        | Command::Reconstruct(c)
        | Command::Evaluate(c)
        | Command::Report(c) => c,
    };
    let cfg = match common.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::GenData(_) => experiment::gen_data(&cfg),
        Command::Fit(_) => experiment::fit_stage(&cfg),
        Command::Design(_) => experiment::design_stage(&cfg),
        Command::Reconstruct(_) => experiment::reconstruct_stage(&cfg),
        Command::Evaluate(_) => experiment::run_experiment(&cfg).map(|o| {
            print_summary(&o.summary);
            o.failures
        }),
        Command::Report(_) => experiment::report_stage(&cfg).map(|s| {
            print_summary(&s);
            0
        }),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} failures recorded under {}", cfg.out_dir.display());
            ExitCode::from(2)
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_summary(rows: &[experiment::SummaryRow]) {
    println!("{:<24} {:<6} {:<5} {:>6} {:>4} {:>10} {:>8}", "method", "obj", "recon", "angles", "n", "psnr_db", "stderr");
    for r in rows {
        println!(
            "{:<24} {:<6} {:<5} {:>6} {:>4} {:>10.3} {:>8.3}",
            r.method, r.objective, r.recon, r.angles, r.n, r.mean_psnr, r.std_error
        );
    }
}
