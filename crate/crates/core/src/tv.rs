//! Anisotropic total variation: `Σ |x[i,j] − x[i+1,j]| + Σ |x[i,j] − x[i,j+1]|`
//! with no wraparound.

use crate::error::{check_len, Result};

/// Exact anisotropic TV of a row-major `h × w` image.
pub fn tv_exact(data: &[f64], height: usize, width: usize) -> Result<f64> {
    check_len("tv image", height * width, data.len())?;
    let mut total = 0.0;
    for r in 0..height.saturating_sub(1) {
        for c in 0..width {
            total += (data[r * width + c] - data[(r + 1) * width + c]).abs();
        }
    }
    for r in 0..height {
        for c in 0..width.saturating_sub(1) {
            total += (data[r * width + c] - data[r * width + c + 1]).abs();
        }
    }
    Ok(total)
}

/// Smoothed TV with `|t| ≈ √(t² + δ²)`; adds its gradient into `grad`
/// scaled by `weight` and returns the (unscaled) value.
pub fn tv_smoothed(
    data: &[f64],
    height: usize,
    width: usize,
    delta: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_len("tv image", height * width, data.len())?;
    check_len("tv gradient", height * width, grad.len())?;
    let d2 = delta * delta;
    let mut total = 0.0;
    let mut edge = |a: usize, b: usize, grad: &mut [f64]| {
        let t = data[a] - data[b];
        let m = (t * t + d2).sqrt();
        total += m;
        if m > 0.0 {
            let g = weight * t / m;
            grad[a] += g;
            grad[b] -= g;
        }
    };
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if r + 1 < height {
                edge(i, i + width, grad);
            }
            if c + 1 < width {
                edge(i, i + 1, grad);
            }
        }
    }
    Ok(total)
}
