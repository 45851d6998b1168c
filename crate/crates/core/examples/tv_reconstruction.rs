//! TV reconstructions from equidistant angle sets of growing size.

use ctdesign::design::equidistant_design;
use ctdesign::operator::SubsetOperator;
use ctdesign::phantom::{sample_phantom, simulate_measurements, PhantomSpec};
use ctdesign::recon::{tv_reconstruct, ReconConfig};
use ctdesign::tomo::{build_geometry, default_detector_count, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let (h, w, n) = (48, 48, 90);
    let op = TomoOperator::new(build_geometry(h, w, n, default_detector_count(h, w))?);
    let truth = sample_phantom(&PhantomSpec { height: h, width: w, ..Default::default() }, 6)?.image;
    for count in [5, 10, 20, 40] {
        let angles = equidistant_design(count, n)?;
        let y = simulate_measurements(&op, truth.data(), &angles, 0.05, 9, false)?.y;
        let sub = SubsetOperator::new(&op, &angles);
        let config = ReconConfig { lambda: 1.5, iterations: 3000, ..Default::default() };
        let rec = tv_reconstruct(&sub, &y, h, w, &config, Some(&truth))?;
        let last = rec.objective_trace.last().map_or(f64::NAN, |t| t.1);
        println!("{count:3} angles: PSNR {:.2} dB, objective {last:.3}", rec.psnr.unwrap_or(f64::NAN));
    }
    Ok(())
}
