use std::ops::Range;

use ndarray::{Array2, ArrayView2};

use super::network::{ForwardCache, Network};
use crate::error::{check_len, Result};

/// A matrix-free Jacobian `J` (`d_x × d_θ`) of an image-valued map.
pub trait Jacobian: Send + Sync {
    /// `d_θ`
    fn n_params(&self) -> usize;
    /// `d_x`
    fn n_pixels(&self) -> usize;
    /// `J v`
    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>>;
    /// `Jᵀ u`
    fn vjp(&self, u: &[f64]) -> Result<Vec<f64>>;

    /// Parameter blocks that receive separate prior variances.
    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        vec![("all".into(), 0..self.n_params())]
    }

    /// Row-wise `J v` for a `k × d_θ` batch.
    fn jvp_rows(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("jvp batch", self.n_params(), vs.ncols())?;
        let mut out = Array2::zeros((vs.nrows(), self.n_pixels()));
        for (v, mut o) in vs.outer_iter().zip(out.outer_iter_mut()) {
            let jv = self.jvp(&v.to_vec())?;
            o.assign(&ndarray::ArrayView1::from(&jv));
        }
        Ok(out)
    }

    /// Row-wise `Jᵀ u` for a `k × d_x` batch.
    fn vjp_rows(&self, us: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("vjp batch", self.n_pixels(), us.ncols())?;
        let mut out = Array2::zeros((us.nrows(), self.n_params()));
        for (u, mut o) in us.outer_iter().zip(out.outer_iter_mut()) {
            let g = self.vjp(&u.to_vec())?;
            o.assign(&ndarray::ArrayView1::from(&g));
        }
        Ok(out)
    }
}

/// Jacobian of a [`Network`] at fixed parameters `θ*`.
///
/// Holds the primal forward pass, so every `jvp`/`vjp` costs roughly one
/// extra pass. Immutable and safe to share across threads.
#[derive(Debug, Clone)]
pub struct NetworkJacobian {
    network: Network,
    theta: Vec<f64>,
    cache: ForwardCache,
}

impl NetworkJacobian {
    pub fn new(network: Network, theta: Vec<f64>) -> Result<Self> {
        let cache = network.forward_cached(&theta)?;
        Ok(Self {
            network,
            theta,
            cache,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `x(θ*)`
    pub fn output(&self) -> Vec<f64> {
        self.cache.output()
    }
}

impl Jacobian for NetworkJacobian {
    fn n_params(&self) -> usize {
        self.network.n_params()
    }

    fn n_pixels(&self) -> usize {
        self.network.n_pixels()
    }

    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.network.jvp(&self.theta, &self.cache, v)
    }

    fn vjp(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.network.vjp(&self.theta, &self.cache, u)
    }

    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        self.network.blocks()
    }
}

/// An explicit `d_x × d_θ` Jacobian, for small models and tests.
#[derive(Debug, Clone)]
pub struct DenseJacobian {
    matrix: Array2<f64>,
    blocks: Vec<(String, Range<usize>)>,
}

impl DenseJacobian {
    pub fn new(matrix: Array2<f64>) -> Self {
        let blocks = vec![("all".into(), 0..matrix.ncols())];
        Self { matrix, blocks }
    }

    pub fn with_blocks(matrix: Array2<f64>, blocks: Vec<(String, Range<usize>)>) -> Self {
        Self { matrix, blocks }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl Jacobian for DenseJacobian {
    fn n_params(&self) -> usize {
        self.matrix.ncols()
    }

    fn n_pixels(&self) -> usize {
        self.matrix.nrows()
    }

    fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("dense jvp", self.matrix.ncols(), v.len())?;
        Ok(self.matrix.dot(&ndarray::ArrayView1::from(v)).to_vec())
    }

    fn vjp(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len("dense vjp", self.matrix.nrows(), u.len())?;
        Ok(self.matrix.t().dot(&ndarray::ArrayView1::from(u)).to_vec())
    }

    fn blocks(&self) -> Vec<(String, Range<usize>)> {
        self.blocks.clone()
    }
}

/// Dense `J` assembled from `d_θ` basis-vector jvps.
pub fn dense_jacobian(jac: &dyn Jacobian) -> Result<Array2<f64>> {
    let vs = Array2::eye(jac.n_params());
    Ok(jac.jvp_rows(vs.view())?.reversed_axes())
}
