//! Linearises a fitted network around its parameters and fits a g-prior on
//! the parameter space. The fitted prior reproduces the second moment of the
//! pilot data exactly.

use std::sync::Arc;

use ctdesign::design::equidistant_design;
use ctdesign::neural::{fit_gprior, train_dip, LinearisedPrior, Network, NetworkJacobian, NetworkSpec, TrainConfig};
use ctdesign::operator::SubsetOperator;
use ctdesign::phantom::{sample_phantom, simulate_measurements, PhantomSpec};
use ctdesign::prior::{measurement_covariance, FitOptions, PriorCovariance};
use ctdesign::tomo::{build_geometry, default_detector_count, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let (h, w) = (24, 24);
    let op = TomoOperator::new(build_geometry(h, w, 40, default_detector_count(h, w))?);
    let truth = sample_phantom(&PhantomSpec { height: h, width: w, ..Default::default() }, 8)?.image;
    let pilot = equidistant_design(5, 40)?;
    let y = simulate_measurements(&op, truth.data(), &pilot, 0.05, 1, false)?.y;
    let sub = SubsetOperator::new(&op, &pilot);

    let net = Network::new(&NetworkSpec { height: h, width: w, channels: 6, ..Default::default() })?;
    let config = TrainConfig { lambda: 1.0, iterations: 800, learning_rate: 3e-3, ..Default::default() };
    let trained = train_dip(&net, &sub, &y, &config, None)?;
    let jac = Arc::new(NetworkJacobian::new(net, trained.theta)?);

    let fit = fit_gprior(jac.as_ref(), &sub, &y, &FitOptions::default())?;
    println!("fitted {:?}, σ_y² = {:.4e}", fit.prior.hyperparameters(), fit.noise.variance);

    let prior = LinearisedPrior::new(jac, fit.prior)?;
    let cov = measurement_covariance(&prior, &sub)?;
    let model = cov.diag().mean().unwrap_or(0.0) + fit.noise.variance;
    let data = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
    println!("mean diag Σ_yy = {model:.6}, mean y² = {data:.6}");

    let samples = prior.sample(&mut ctdesign::rng::stream(0, 0), 4)?;
    println!("drew {} image-space samples of length {}", samples.nrows(), samples.ncols());
    Ok(())
}
