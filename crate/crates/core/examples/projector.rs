//! Builds a parallel-beam geometry, projects a phantom and checks the adjoint.

use ctdesign::phantom::{sample_phantom, PhantomSpec};
use ctdesign::tomo::{build_geometry, default_detector_count, AngleSubset, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let (h, w, n_angles) = (32, 32, 36);
    let geom = build_geometry(h, w, n_angles, default_detector_count(h, w))?;
    println!("{h}x{w} image, {n_angles} angles, {} detector pixels per angle", geom.detector_count);
    let op = TomoOperator::new(geom);

    for a in [0, 9, 18, 27] {
        let block = op.block(a)?;
        println!("angle {:6.1}°: {} nonzeros", op.geometry().angles_deg[a], block.nnz());
    }

    let spec = PhantomSpec { height: h, width: w, ..Default::default() };
    let x = sample_phantom(&spec, 3)?.image;
    let subset = AngleSubset::new(vec![0, 12, 24], n_angles)?;
    let y = op.forward(&subset, x.data())?;
    println!("projected {} values, total {:.2}", y.len(), y.iter().sum::<f64>());

    let back = op.adjoint(&subset, &y)?;
    let lhs: f64 = y.iter().map(|v| v * v).sum();
    let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
    println!("<Ax, Ax> = {lhs:.6}, <x, AᵀAx> = {rhs:.6}");
    Ok(())
}
