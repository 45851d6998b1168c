//! Gaussian priors over images and evidence-based hyperparameter fitting.

mod evidence;
mod isotropic;
mod matern;

pub use evidence::{
    fit_hyperparameters, log_evidence, log_evidence_dense, measurement_covariance, EvidenceReport,
    FitOptions, FittedModel, PriorFamily,
};
pub(crate) use evidence::symmetrise;
pub use isotropic::IsotropicPrior;
pub use matern::{matern_cov_entry, CirculantEmbedding, Matern12Prior};

use ndarray::{Array2, ArrayView2};

use crate::error::Result;
use crate::rng::Rng;

/// Matrix-free zero-mean Gaussian prior `x ~ N(0, Σ_xx)`.
///
/// Batches are `k × d_x` arrays with one vector per row.
pub trait PriorCovariance: Send + Sync {
    /// `d_x`
    fn dim(&self) -> usize;

    /// `Σ_xx v` for each row `v`.
    fn matvec_rows(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// `k` independent draws, one per row.
    fn sample(&self, rng: &mut Rng, k: usize) -> Result<Array2<f64>>;

    /// Named hyperparameters for reporting.
    fn hyperparameters(&self) -> Vec<(String, f64)>;

    fn family(&self) -> &'static str;

    fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let vs = ArrayView2::from_shape((1, v.len()), v).map_err(|e| {
            crate::Error::Argument(format!("matvec input: {e}"))
        })?;
        let out = self.matvec_rows(vs)?;
        Ok(out.into_raw_vec_and_offset().0)
    }
}

/// Measurement noise `ε ~ N(0, σ_y² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub variance: f64,
}

impl NoiseModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(crate::Error::Argument(format!(
                "noise variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self { variance })
    }
}
