//! Shared oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use ndarray::Array2;

pub fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Dense projection matrix of one angle by sampling each ray at spacing
/// `step` and binning sample lengths into pixels.
///
/// Each ray is sampled twice, shifted by ±1e-9 along the detector axis, and
/// the two are averaged. A ray lying on a pixel boundary therefore splits
/// between the two neighbouring pixels.
pub fn ray_sampling_block(
    height: usize,
    width: usize,
    angle_deg: f64,
    offsets: &[f64],
    step: f64,
) -> Array2<f64> {
    let theta = angle_deg.to_radians();
    let (s, c) = theta.sin_cos();
    let (u, r) = ([c, s], [-s, c]);
    let half = [width as f64 / 2.0, height as f64 / 2.0];
    let reach = (half[0] * half[0] + half[1] * half[1]).sqrt() + 1.0;
    let n = (2.0 * reach / step).ceil() as usize;
    let mut out = Array2::zeros((offsets.len(), height * width));
    for (p, &offset) in offsets.iter().enumerate() {
        for shift in [-1e-9, 1e-9] {
            let o = offset + shift;
            for i in 0..n {
                let t = -reach + (i as f64 + 0.5) * step;
                let x = o * u[0] + t * r[0];
                let y = o * u[1] + t * r[1];
                let col = (x + half[0]).floor();
                let row = (half[1] - y).floor();
                if col < 0.0 || row < 0.0 || col >= width as f64 || row >= height as f64 {
                    continue;
                }
                out[[p, row as usize * width + col as usize]] += 0.5 * step;
            }
        }
    }
    out
}

/// `log N(y; 0, S)` from an eigendecomposition, independent of any Cholesky.
pub fn mvn_logpdf(s: &DMatrix<f64>, y: &[f64]) -> f64 {
    let eig = s.clone().symmetric_eigen();
    let yv = nalgebra::DVector::from_column_slice(y);
    let proj = eig.eigenvectors.transpose() * yv;
    let quad: f64 = proj.iter().zip(eig.eigenvalues.iter()).map(|(p, l)| p * p / l).sum();
    let logdet: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    -0.5 * (quad + logdet + y.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}
