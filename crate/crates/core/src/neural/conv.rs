//! Convolution primitives on `(pixels × channels)` feature maps.
//!
//! A feature map of height `h`, width `w` and `c` channels is an `h·w × c`
//! array with row index `row * w + col`. Convolutions are zero padded and
//! lowered to matrix products through im2col.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    /// Row length of the im2col matrix: `k · k · c_in`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

/// `(out_h·out_w) × (k·k·c_in)` patch matrix; column `(ky·k + kx)·c_in + ci`.
pub fn im2col(input: ArrayView2<'_, f64>, shape: &ConvShape) -> Array2<f64> {
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let (k, c, s, pad) = (shape.kernel, shape.in_c, shape.stride, shape.pad() as isize);
    let mut cols = Array2::<f64>::zeros((oh * ow, shape.patch_len()));
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            let row = row.as_slice_mut().expect("contiguous row");
            for ky in 0..k {
                let iy = (oy * s) as isize + ky as isize - pad;
                if iy < 0 || iy >= shape.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s) as isize + kx as isize - pad;
                    if ix < 0 || ix >= shape.in_w as isize {
                        continue;
                    }
                    let from = (iy as usize * shape.in_w + ix as usize) * c;
                    let to = (ky * k + kx) * c;
                    row[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input map.
pub fn col2im(cols: ArrayView2<'_, f64>, shape: &ConvShape) -> Array2<f64> {
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let (k, c, s, pad) = (shape.kernel, shape.in_c, shape.stride, shape.pad() as isize);
    let mut out = Array2::<f64>::zeros((shape.in_h * shape.in_w, c));
    let dst = out.as_slice_mut().expect("owned");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            for ky in 0..k {
                let iy = (oy * s) as isize + ky as isize - pad;
                if iy < 0 || iy >= shape.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s) as isize + kx as isize - pad;
                    if ix < 0 || ix >= shape.in_w as isize {
                        continue;
                    }
                    let to = (iy as usize * shape.in_w + ix as usize) * c;
                    let from = (ky * k + kx) * c;
                    for ci in 0..c {
                        dst[to + ci] += row[from + ci];
                    }
                }
            }
        }
    }
    out
}

/// Linear interpolation weights from `low` samples onto `high` samples with
/// pixel-centre alignment; each output takes two taps.
fn interp_weights(high: usize, low: usize) -> Vec<[(usize, f64); 2]> {
    let scale = low as f64 / high as f64;
    (0..high)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (low - 1) as f64);
            let i0 = s.floor() as usize;
            let f = s - i0 as f64;
            [(i0, 1.0 - f), ((i0 + 1).min(low - 1), f)]
        })
        .collect()
}

/// Bilinear upsampling of a `(lh × lw)` map onto `(h × w)`, with
/// `lh = ceil(h / 2)`.
pub fn upsample(input: ArrayView2<'_, f64>, low: (usize, usize), high: (usize, usize)) -> Array2<f64> {
    let c = input.ncols();
    let wr = interp_weights(high.0, low.0);
    let wc = interp_weights(high.1, low.1);
    let mut out = Array2::<f64>::zeros((high.0 * high.1, c));
    for (r, taps_r) in wr.iter().enumerate() {
        for (col, taps_c) in wc.iter().enumerate() {
            let mut row = out.row_mut(r * high.1 + col);
            for &(sr, a) in taps_r {
                for &(sc, b) in taps_c {
                    if a * b != 0.0 {
                        row.scaled_add(a * b, &input.row(sr * low.1 + sc));
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample`].
pub fn upsample_adjoint(grad: ArrayView2<'_, f64>, low: (usize, usize), high: (usize, usize)) -> Array2<f64> {
    let c = grad.ncols();
    let wr = interp_weights(high.0, low.0);
    let wc = interp_weights(high.1, low.1);
    let mut out = Array2::<f64>::zeros((low.0 * low.1, c));
    for (r, taps_r) in wr.iter().enumerate() {
        for (col, taps_c) in wc.iter().enumerate() {
            let g = grad.row(r * high.1 + col);
            for &(sr, a) in taps_r {
                for &(sc, b) in taps_c {
                    if a * b != 0.0 {
                        out.row_mut(sr * low.1 + sc).scaled_add(a * b, &g);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn im2col_adjointness() {
        for (h, w, stride) in [(7, 5, 1), (8, 8, 2), (5, 6, 2)] {
            let shape = ConvShape {
                in_h: h,
                in_w: w,
                in_c: 3,
                kernel: 3,
                stride,
            };
            let x = random(h * w, 3, 1);
            let g = random(shape.out_h() * shape.out_w(), shape.patch_len(), 2);
            let lhs = (&im2col(x.view(), &shape) * &g).sum();
            let rhs = (&x * &col2im(g.view(), &shape)).sum();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_adjointness() {
        let (low, high) = ((3, 4), (5, 8));
        let x = random(12, 2, 3);
        let g = random(40, 2, 4);
        let lhs = (&upsample(x.view(), low, high) * &g).sum();
        let rhs = (&x * &upsample_adjoint(g.view(), low, high)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants() {
        let (low, high) = ((3, 4), (5, 8));
        let x = Array2::from_elem((12, 2), 0.7);
        let up = upsample(x.view(), low, high);
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn stride_two_output_size() {
        let s = ConvShape {
            in_h: 7,
            in_w: 64,
            in_c: 1,
            kernel: 3,
            stride: 2,
        };
        assert_eq!((s.out_h(), s.out_w()), (4, 32));
    }

    #[test]
    fn identity_kernel() {
        // A 3×3 kernel with a single 1 in the centre copies the input.
        let shape = ConvShape {
            in_h: 4,
            in_w: 5,
            in_c: 1,
            kernel: 3,
            stride: 1,
        };
        let x = random(20, 1, 5);
        let mut w = Array2::<f64>::zeros((9, 1));
        w[[4, 0]] = 1.0;
        let y = im2col(x.view(), &shape).dot(&w);
        assert_eq!(y, x);
    }
}
