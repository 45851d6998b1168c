use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use super::PriorCovariance;
use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

/// `Σ_xx = σ_x² I`: uncorrelated pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicPrior {
    dim: usize,
    variance: f64,
}

impl IsotropicPrior {
    pub fn new(dim: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Argument(format!(
                "isotropic prior variance must be positive, got {variance}"
            )));
        }
        Ok(Self { dim, variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl PriorCovariance for IsotropicPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn matvec_rows(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("isotropic matvec", self.dim, vs.ncols())?;
        Ok(vs.mapv(|v| v * self.variance))
    }

    fn sample(&self, rng: &mut Rng, k: usize) -> Result<Array2<f64>> {
        let sd = self.variance.sqrt();
        Ok(Array2::from_shape_simple_fn((k, self.dim), || {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        }))
    }

    fn hyperparameters(&self) -> Vec<(String, f64)> {
        vec![("sigma_x2".into(), self.variance)]
    }

    fn family(&self) -> &'static str {
        "isotropic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_variance_is_identity() {
        let p = IsotropicPrior::new(5, 1.0).unwrap();
        let v = vec![1.0, -2.0, 3.0, 0.5, 0.0];
        assert_eq!(p.matvec(&v).unwrap(), v);
    }

    #[test]
    fn scales_basis_vector() {
        let p = IsotropicPrior::new(3, 2.5).unwrap();
        assert_eq!(p.matvec(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 2.5, 0.0]);
    }

    #[test]
    fn dense_reconstruction_from_basis() {
        let p = IsotropicPrior::new(16, 0.7).unwrap();
        let dense = p.matvec_rows(Array2::eye(16).view()).unwrap();
        assert_eq!(dense, Array2::eye(16) * 0.7);
    }

    #[test]
    fn rejects_bad_variance() {
        assert!(IsotropicPrior::new(3, 0.0).is_err());
        assert!(IsotropicPrior::new(3, f64::NAN).is_err());
    }

    #[test]
    fn wrong_length() {
        let p = IsotropicPrior::new(3, 1.0).unwrap();
        assert!(p.matvec(&[1.0; 4]).is_err());
    }
}
