//! Samples rectangle phantoms and a noisy sinogram, printing the image as text.

use ctdesign::phantom::{sample_phantom, simulate_measurements, PhantomSpec};
use ctdesign::tomo::{build_geometry, default_detector_count, AngleSubset, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let spec = PhantomSpec { height: 32, width: 32, ..Default::default() };
    for seed in 0..3 {
        let p = sample_phantom(&spec, seed)?;
        println!("seed {seed}: preferential direction {:.1}°", p.preferential_deg);
        for row in (0..32).step_by(2) {
            let line: String = (0..32)
                .map(|col| match p.image.get(row, col) {
                    v if v > 0.66 => '#',
                    v if v > 0.33 => '+',
                    v if v > 0.0 => '.',
                    _ => ' ',
                })
                .collect();
            println!("  |{line}|");
        }
    }

    let op = TomoOperator::new(build_geometry(32, 32, 50, default_detector_count(32, 32))?);
    let x = sample_phantom(&spec, 0)?.image;
    let all = AngleSubset::new((0..50).collect(), 50)?;
    let sino = simulate_measurements(&op, x.data(), &all, 0.05, 7, true)?;
    println!("5% noise: s = {:.4} over {} measurements", sino.noise_std, sino.y.len());
    Ok(())
}
