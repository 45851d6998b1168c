//! Fits an untrained U-net to sparse-view data with a TV penalty and compares
//! it with a plain TV reconstruction.

use ctdesign::design::equidistant_design;
use ctdesign::neural::{train_dip, Network, NetworkSpec, TrainConfig};
use ctdesign::operator::SubsetOperator;
use ctdesign::phantom::{sample_phantom, simulate_measurements, PhantomSpec};
use ctdesign::recon::{psnr, tv_reconstruct, ReconConfig, DATA_RANGE};
use ctdesign::tomo::{build_geometry, default_detector_count, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let (h, w) = (32, 32);
    let op = TomoOperator::new(build_geometry(h, w, 60, default_detector_count(h, w))?);
    let truth = sample_phantom(&PhantomSpec { height: h, width: w, ..Default::default() }, 4)?.image;
    let angles = equidistant_design(10, 60)?;
    let y = simulate_measurements(&op, truth.data(), &angles, 0.05, 5, false)?.y;
    let sub = SubsetOperator::new(&op, &angles);

    let net = Network::new(&NetworkSpec { height: h, width: w, channels: 8, ..Default::default() })?;
    println!("network with {} parameters", net.n_params());
    let config = TrainConfig { lambda: 1.0, iterations: 3000, learning_rate: 1e-2, ..Default::default() };
    let trained = train_dip(&net, &sub, &y, &config, None)?;
    let dip = net.forward(&trained.theta)?;
    println!(
        "DIP: objective {:.3} -> {:.3}, PSNR {:.2} dB",
        trained.loss_trace[0],
        trained.final_loss,
        psnr(&dip, &truth, DATA_RANGE)?
    );

    let tv = tv_reconstruct(&sub, &y, h, w, &ReconConfig { lambda: 1.0, iterations: 3000, ..Default::default() }, Some(&truth))?;
    let tv_objective = tv.objective_trace.last().map_or(f64::NAN, |t| t.1);
    println!("TV:  objective {tv_objective:.3}, PSNR {:.2} dB", tv.psnr.unwrap_or(f64::NAN));
    Ok(())
}
