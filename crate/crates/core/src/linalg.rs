//! Dense Cholesky factorisation with block extension and blocked triangular
//! solves. Everything here works on row-major `ndarray` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = M + jitter·I`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Array2<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factorises `matrix + jitter·I`. Only the lower triangle of `matrix` is read.
    pub fn new(matrix: ArrayView2<'_, f64>, jitter: f64) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::Argument(format!(
                "cholesky of non-square {}x{} matrix",
                n,
                matrix.ncols()
            )));
        }
        let mut factor = Array2::<f64>::zeros((n, n));
        factorise_into(matrix, jitter, factor.view_mut())?;
        Ok(Self { factor, jitter })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn factor(&self) -> ArrayView2<'_, f64> {
        self.factor.view()
    }

    /// `log det(M + jitter·I)`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.factor.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Grows the factor by `m` rows/columns for the bordered matrix
    /// `[[M, cross], [crossᵀ, corner]]`, reusing the existing factor.
    /// `cross` is `n × m`, `corner` is `m × m`. The stored jitter is applied
    /// to the new diagonal block.
    pub fn extend(&mut self, cross: ArrayView2<'_, f64>, corner: ArrayView2<'_, f64>) -> Result<()> {
        let n = self.dim();
        let m = corner.nrows();
        if cross.nrows() != n || cross.ncols() != m || corner.ncols() != m {
            return Err(Error::Argument(format!(
                "cholesky extension shapes: factor {n}, cross {:?}, corner {:?}",
                cross.dim(),
                corner.dim()
            )));
        }
        // X = L⁻¹ cross, so the new off-diagonal block is Xᵀ.
        let mut x = cross.to_owned();
        solve_lower_in_place(self.factor.view(), x.view_mut());
        let mut schur = corner.to_owned();
        general_mat_mul(-1.0, &x.t(), &x, 1.0, &mut schur);
        let mut tail = Array2::<f64>::zeros((m, m));
        factorise_into(schur.view(), self.jitter, tail.view_mut()).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, value, jitter } => Error::NotPositiveDefinite {
                pivot: pivot + n,
                value,
                jitter,
            },
            other => other,
        })?;
        let mut grown = Array2::<f64>::zeros((n + m, n + m));
        grown.slice_mut(s![..n, ..n]).assign(&self.factor);
        grown.slice_mut(s![n.., ..n]).assign(&x.t());
        grown.slice_mut(s![n.., n..]).assign(&tail);
        self.factor = grown;
        Ok(())
    }

    /// Solves `(M + jitter·I) X = B` for every column of `b` (shape `n × k`).
    pub fn solve_columns(&self, b: &mut Array2<f64>) {
        solve_lower_in_place(self.factor.view(), b.view_mut());
        solve_lower_transpose_in_place(self.factor.view(), b.view_mut());
    }

    /// Solves for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut rhs = Array2::from_shape_vec((n, 1), b.to_vec()).expect("shape checked");
        self.solve_columns(&mut rhs);
        rhs.into_raw_vec_and_offset().0
    }

    /// Dense reconstruction `L Lᵀ` (includes the jitter).
    pub fn reconstruct(&self) -> Array2<f64> {
        self.factor.dot(&self.factor.t())
    }
}

fn factorise_into(
    matrix: ArrayView2<'_, f64>,
    jitter: f64,
    mut out: ArrayViewMut2<'_, f64>,
) -> Result<()> {
    let n = matrix.nrows();
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = {
                let li = out.slice(s![i, ..j]);
                let lj = out.slice(s![j, ..j]);
                li.iter().zip(lj.iter()).map(|(a, b)| a * b).sum()
            };
            let mut value = matrix[[i, j]] - dot;
            if i == j {
                value += jitter;
                if !(value > 0.0) || !value.is_finite() {
                    return Err(Error::NotPositiveDefinite {
                        pivot: i,
                        value,
                        jitter,
                    });
                }
                out[[i, i]] = value.sqrt();
            } else {
                out[[i, j]] = value / out[[j, j]];
            }
        }
    }
    Ok(())
}

/// Overwrites `b` (n × k) with `L⁻¹ b`.
pub fn solve_lower_in_place(l: ArrayView2<'_, f64>, mut b: ArrayViewMut2<'_, f64>) {
    let n = l.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        if start > 0 {
            let (done, mut rest) = b.view_mut().split_at(ndarray::Axis(0), start);
            let mut block = rest.slice_mut(s![..end - start, ..]);
            general_mat_mul(-1.0, &l.slice(s![start..end, ..start]), &done, 1.0, &mut block);
        }
        for i in start..end {
            for j in start..i {
                let lij = l[[i, j]];
                if lij != 0.0 {
                    let (upper, mut lower) = b.view_mut().split_at(ndarray::Axis(0), i);
                    let src = upper.row(j);
                    lower.row_mut(0).scaled_add(-lij, &src);
                }
            }
            let d = l[[i, i]];
            b.row_mut(i).mapv_inplace(|v| v / d);
        }
        start = end;
    }
}

/// Overwrites `b` (n × k) with `L⁻ᵀ b`.
pub fn solve_lower_transpose_in_place(l: ArrayView2<'_, f64>, mut b: ArrayViewMut2<'_, f64>) {
    let n = l.nrows();
    let mut end = n;
    while end > 0 {
        let start = end.saturating_sub(BLOCK);
        if end < n {
            let (mut head, done) = b.view_mut().split_at(ndarray::Axis(0), end);
            let mut block = head.slice_mut(s![start.., ..]);
            general_mat_mul(-1.0, &l.slice(s![end.., start..end]).t(), &done, 1.0, &mut block);
        }
        for i in (start..end).rev() {
            let d = l[[i, i]];
            b.row_mut(i).mapv_inplace(|v| v / d);
            for j in start..i {
                let lij = l[[i, j]];
                if lij != 0.0 {
                    let (mut upper, lower) = b.view_mut().split_at(ndarray::Axis(0), i);
                    let src = lower.row(0);
                    upper.row_mut(j).scaled_add(-lij, &src);
                }
            }
        }
        end = start;
    }
}

/// `log det` of a small symmetric positive-definite matrix.
pub fn logdet_spd(matrix: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(Cholesky::new(matrix, 0.0)?.logdet())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, n + 3), |_| rng.random_range(-1.0..1.0));
        let mut m = a.dot(&a.t());
        for i in 0..n {
            m[[i, i]] += 0.1;
        }
        m
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let m = random_spd(150, 1);
        let chol = Cholesky::new(m.view(), 0.0).unwrap();
        let r = chol.reconstruct();
        let err = (&r - &m).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / m.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12);
    }

    #[test]
    fn extension_matches_full_factor() {
        let m = random_spd(130, 2);
        let n = 70;
        let mut chol = Cholesky::new(m.slice(s![..n, ..n]), 0.5).unwrap();
        chol.extend(m.slice(s![..n, n..]), m.slice(s![n.., n..])).unwrap();
        let full = Cholesky::new(m.view(), 0.5).unwrap();
        let diff = (&chol.factor - &full.factor).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn solve_many_rhs() {
        let m = random_spd(140, 3);
        let chol = Cholesky::new(m.view(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Array2::from_shape_fn((140, 7), |_| rng.random_range(-1.0..1.0));
        let mut x = b.clone();
        chol.solve_columns(&mut x);
        let back = m.dot(&x);
        let err = (&back - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn indefinite_is_reported() {
        let mut m = Array2::<f64>::eye(3);
        m[[2, 2]] = -1.0;
        assert!(matches!(
            Cholesky::new(m.view(), 0.0),
            Err(Error::NotPositiveDefinite { pivot: 2, .. })
        ));
        assert!(Cholesky::new(m.view(), 2.0).is_ok());
    }

    #[test]
    fn logdet_of_diagonal() {
        let m = Array2::from_diag(&ndarray::arr1(&[2.0, 3.0, 0.5]));
        assert!((logdet_spd(m.view()).unwrap() - 3.0f64.ln()).abs() < 1e-14);
    }
}
