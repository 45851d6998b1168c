//! Generic linear measurement operators.

use ndarray::{Array2, ArrayView2};

use crate::error::{check_len, Result};
use crate::tomo::{AngleSubset, TomoOperator};

/// A linear map from images (`d_x`) to measurements (`d_y`) with its adjoint.
pub trait LinearOperator: Sync {
    fn image_len(&self) -> usize;
    fn measurement_len(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>>;

    /// Row-wise forward projection of a `k × d_x` batch.
    fn forward_rows(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((xs.nrows(), self.measurement_len()));
        for (x, mut o) in xs.outer_iter().zip(out.outer_iter_mut()) {
            o.assign(&ndarray::Array1::from(self.forward(&x.to_vec())?));
        }
        Ok(out)
    }

    /// Row-wise adjoint of a `k × d_y` batch.
    fn adjoint_rows(&self, ys: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ys.nrows(), self.image_len()));
        for (y, mut o) in ys.outer_iter().zip(out.outer_iter_mut()) {
            o.assign(&ndarray::Array1::from(self.adjoint(&y.to_vec())?));
        }
        Ok(out)
    }

    /// The rows of the matrix as images, `d_y × d_x`.
    fn rows_dense(&self) -> Result<Array2<f64>> {
        self.adjoint_rows(Array2::eye(self.measurement_len()).view())
    }
}

/// The tomographic operator restricted to an ordered angle subset.
#[derive(Debug, Clone, Copy)]
pub struct SubsetOperator<'a> {
    pub op: &'a TomoOperator,
    pub subset: &'a AngleSubset,
}

impl<'a> SubsetOperator<'a> {
    pub fn new(op: &'a TomoOperator, subset: &'a AngleSubset) -> Self {
        Self { op, subset }
    }
}

impl LinearOperator for SubsetOperator<'_> {
    fn image_len(&self) -> usize {
        self.op.geometry().pixel_count()
    }

    fn measurement_len(&self) -> usize {
        self.op.geometry().measurement_len(self.subset.len())
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.op.forward(self.subset, x)
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.op.adjoint(self.subset, y)
    }

    fn forward_rows(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.op.forward_rows(self.subset, xs)
    }

    fn adjoint_rows(&self, ys: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.op.adjoint_rows(self.subset, ys)
    }

    fn rows_dense(&self) -> Result<Array2<f64>> {
        self.op.rows_dense(self.subset)
    }
}

/// `A = I_n`; used as a test harness and for denoising-style problems.
#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl LinearOperator for Identity {
    fn image_len(&self) -> usize {
        self.0
    }

    fn measurement_len(&self) -> usize {
        self.0
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("identity forward", self.0, x.len())?;
        Ok(x.to_vec())
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("identity adjoint", self.0, y.len())?;
        Ok(y.to_vec())
    }
}

/// An explicit dense matrix, mainly for small experiments and tests.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub Array2<f64>);

impl LinearOperator for DenseOperator {
    fn image_len(&self) -> usize {
        self.0.ncols()
    }

    fn measurement_len(&self) -> usize {
        self.0.nrows()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense forward", self.0.ncols(), x.len())?;
        Ok(self.0.dot(&ndarray::ArrayView1::from(x)).to_vec())
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("dense adjoint", self.0.nrows(), y.len())?;
        Ok(self.0.t().dot(&ndarray::ArrayView1::from(y)).to_vec())
    }

    fn forward_rows(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("dense forward batch", self.0.ncols(), xs.ncols())?;
        Ok(xs.dot(&self.0.t()))
    }

    fn adjoint_rows(&self, ys: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("dense adjoint batch", self.0.nrows(), ys.ncols())?;
        Ok(ys.dot(&self.0))
    }
}
