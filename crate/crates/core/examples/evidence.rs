//! Fits isotropic and Matérn-½ priors to a pilot scan by maximising the
//! marginal likelihood.

use ctdesign::operator::SubsetOperator;
use ctdesign::phantom::{sample_phantom, simulate_measurements, PhantomSpec};
use ctdesign::prior::{fit_hyperparameters, FitOptions, PriorFamily};
use ctdesign::tomo::{build_geometry, default_detector_count, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let (h, w) = (32, 32);
    let op = TomoOperator::new(build_geometry(h, w, 50, default_detector_count(h, w))?);
    let x = sample_phantom(&PhantomSpec { height: h, width: w, ..Default::default() }, 1)?.image;
    let pilot = ctdesign::design::equidistant_design(5, 50)?;
    let y = simulate_measurements(&op, x.data(), &pilot, 0.05, 2, false)?;
    println!("true noise variance {:.3e}", y.noise_std.powi(2));

    let sub = SubsetOperator::new(&op, &pilot);
    for family in [PriorFamily::Isotropic, PriorFamily::Matern12] {
        let fit = fit_hyperparameters(family, &sub, &y.y, h, w, &FitOptions::default())?;
        println!(
            "{:9}: log evidence {:10.2} (start {:10.2}), {:?}",
            fit.prior.family(),
            fit.report.log_evidence,
            fit.report.initial_log_evidence,
            fit.report.hyperparameters
        );
    }
    Ok(())
}
