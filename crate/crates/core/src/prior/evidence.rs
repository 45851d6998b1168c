//! Closed-form Gaussian model evidence and its maximisation.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

use super::{CirculantEmbedding, IsotropicPrior, Matern12Prior, NoiseModel, PriorCovariance};
use crate::error::{check_len, Error, Result};
use crate::linalg::{norm_sq, solve_lower_in_place, Cholesky};
use crate::operator::LinearOperator;
use crate::optim::{coordinate_search, SearchOptions};

/// `A Σ_xx Aᵀ` assembled column by column from prior matvecs (noise excluded).
pub fn measurement_covariance(prior: &dyn PriorCovariance, op: &dyn LinearOperator) -> Result<Array2<f64>> {
    check_len("prior vs operator image size", op.image_len(), prior.dim())?;
    let rows = op.rows_dense()?;
    let cov_rows = prior.matvec_rows(rows.view())?;
    let mut c = op.forward_rows(cov_rows.view())?;
    symmetrise(&mut c);
    Ok(c)
}

pub(crate) fn symmetrise(c: &mut Array2<f64>) {
    let n = c.nrows();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (c[[i, j]] + c[[j, i]]);
            c[[i, j]] = m;
            c[[j, i]] = m;
        }
    }
}

/// `log N(y; 0, C + σ_y² I)` including the `-d/2 log 2π` constant.
///
/// Falls back to a tiny diagonal jitter (at most `1e-6 · mean diag`) if the
/// matrix is numerically indefinite.
pub fn log_evidence_dense(cov: ArrayView2<'_, f64>, noise_variance: f64, y: &[f64]) -> Result<f64> {
    let d = y.len();
    check_len("evidence measurements", cov.nrows(), d)?;
    let mut sigma = cov.to_owned();
    for i in 0..d {
        sigma[[i, i]] += noise_variance;
    }
    let mean_diag = sigma.diag().sum() / d as f64;
    let mut jitter = 0.0;
    let chol = loop {
        match Cholesky::new(sigma.view(), jitter) {
            Ok(c) => break c,
            Err(e @ Error::NotPositiveDefinite { .. }) => {
                jitter = if jitter == 0.0 { 1e-12 * mean_diag } else { jitter * 10.0 };
                if jitter > 1e-6 * mean_diag {
                    return Err(Error::Numerical(format!("Σ_yy not positive definite: {e}")));
                }
            }
            Err(e) => return Err(e),
        }
    };
    let mut z = Array2::from_shape_vec((d, 1), y.to_vec()).expect("column");
    solve_lower_in_place(chol.factor(), z.view_mut());
    let quad = norm_sq(z.as_slice().expect("contiguous"));
    Ok(-0.5 * (quad + chol.logdet()) - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Exact log marginal likelihood of `y` under `y = A x + ε`.
pub fn log_evidence(
    prior: &dyn PriorCovariance,
    noise: NoiseModel,
    op: &dyn LinearOperator,
    y: &[f64],
) -> Result<f64> {
    check_len("evidence measurements", op.measurement_len(), y.len())?;
    let cov = measurement_covariance(prior, op)?;
    log_evidence_dense(cov.view(), noise.variance, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorFamily {
    Isotropic,
    Matern12,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Keep `σ_y²` at this value instead of fitting it.
    pub pin_noise: Option<f64>,
    pub search: SearchOptions,
    /// Bounds on the Matérn lengthscale, in pixels.
    pub lengthscale_bounds: (f64, f64),
    /// Initial lengthscales for the multi-start search.
    pub lengthscale_starts: Vec<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            pin_noise: None,
            search: SearchOptions {
                initial_step: 1.0,
                min_step: 1e-2,
                max_evals: 120,
            },
            lengthscale_bounds: (0.05, 512.0),
            lengthscale_starts: vec![2.0, 12.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceReport {
    pub log_evidence: f64,
    pub initial_log_evidence: f64,
    pub hyperparameters: Vec<(String, f64)>,
    /// Best log evidence after every optimiser sweep.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

impl EvidenceReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.hyperparameters.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

pub struct FittedModel {
    pub prior: Arc<dyn PriorCovariance>,
    pub noise: NoiseModel,
    pub report: EvidenceReport,
}

impl std::fmt::Debug for FittedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FittedModel")
            .field("family", &self.prior.family())
            .field("noise", &self.noise)
            .field("report", &self.report)
            .finish()
    }
}

/// Maximises the evidence of the pilot data over `(σ_x², [ℓ], σ_y²)` in log
/// space with a multi-start coordinate search.
pub fn fit_hyperparameters(
    family: PriorFamily,
    op: &dyn LinearOperator,
    y: &[f64],
    height: usize,
    width: usize,
    options: &FitOptions,
) -> Result<FittedModel> {
    check_len("pilot measurements", op.measurement_len(), y.len())?;
    check_len("image size", height * width, op.image_len())?;
    let second_moment = norm_sq(y) / y.len() as f64;
    if !(second_moment > 0.0) {
        return Err(Error::Argument("pilot measurements are identically zero".into()));
    }
    let log_m2 = second_moment.ln();
    let var_bounds = (log_m2 - 30.0, log_m2 + 10.0);
    let noise_starts: Vec<f64> = match options.pin_noise {
        Some(v) => {
            NoiseModel::new(v)?;
            vec![]
        }
        None => vec![(1e-2 * second_moment).ln(), (1e-4 * second_moment).ln()],
    };
    let noise_of = |x: &[f64]| options.pin_noise.unwrap_or_else(|| x[x.len() - 1].exp());

    match family {
        PriorFamily::Isotropic => {
            let base = measurement_covariance(&IsotropicPrior::new(op.image_len(), 1.0)?, op)?;
            let mean_diag = base.diag().mean().unwrap_or(1.0);
            let sx0 = (second_moment / mean_diag).ln();
            let starts = with_noise_starts(vec![vec![sx0]], &noise_starts);
            let mut bounds = vec![var_bounds];
            if options.pin_noise.is_none() {
                bounds.push(var_bounds);
            }
            let objective = |x: &[f64]| {
                let cov = &base * x[0].exp();
                log_evidence_dense(cov.view(), noise_of(x), y)
            };
            let result = coordinate_search(objective, &starts, &bounds, &options.search)?;
            let variance = result.x[0].exp();
            let noise = NoiseModel::new(noise_of(&result.x))?;
            let prior = IsotropicPrior::new(op.image_len(), variance)?;
            Ok(FittedModel {
                report: EvidenceReport {
                    log_evidence: result.value,
                    initial_log_evidence: result.initial_value,
                    hyperparameters: vec![("sigma_x2".into(), variance), ("sigma_y2".into(), noise.variance)],
                    trace: result.trace,
                    evaluations: result.evaluations,
                },
                prior: Arc::new(prior),
                noise,
            })
        }
        PriorFamily::Matern12 => {
            // Unit-variance bases A K_ℓ Aᵀ, cached per lengthscale.
            let mut bases: HashMap<u64, (Arc<CirculantEmbedding>, Array2<f64>)> = HashMap::new();
            let mut basis = |log_l: f64| -> Result<(Arc<CirculantEmbedding>, Array2<f64>)> {
                if let Some(b) = bases.get(&log_l.to_bits()) {
                    return Ok(b.clone());
                }
                let l = log_l.exp();
                let emb = Arc::new(CirculantEmbedding::new(height, width, l, 0)?);
                let unit = Matern12Prior::with_embedding(1.0, l, emb.clone())?;
                let cov = measurement_covariance(&unit, op)?;
                bases.insert(log_l.to_bits(), (emb.clone(), cov.clone()));
                Ok((emb, cov))
            };
            let (lo, hi) = options.lengthscale_bounds;
            let mut starts = Vec::new();
            for &l in &options.lengthscale_starts {
                let log_l = l.clamp(lo, hi).ln();
                let (_, cov) = basis(log_l)?;
                let sx0 = (second_moment / cov.diag().mean().unwrap_or(1.0)).ln();
                starts.push(vec![sx0, log_l]);
            }
            let starts = with_noise_starts(starts, &noise_starts);
            let mut bounds = vec![var_bounds, (lo.ln(), hi.ln())];
            if options.pin_noise.is_none() {
                bounds.push(var_bounds);
            }
            let objective = |x: &[f64]| {
                let (_, cov) = basis(x[1])?;
                let cov = cov * x[0].exp();
                log_evidence_dense(cov.view(), noise_of(x), y)
            };
            let result = coordinate_search(objective, &starts, &bounds, &options.search)?;
            let variance = result.x[0].exp();
            let lengthscale = result.x[1].exp();
            let noise = NoiseModel::new(noise_of(&result.x))?;
            let prior = Matern12Prior::new(height, width, variance, lengthscale)?;
            Ok(FittedModel {
                report: EvidenceReport {
                    log_evidence: result.value,
                    initial_log_evidence: result.initial_value,
                    hyperparameters: vec![
                        ("sigma_x2".into(), variance),
                        ("lengthscale".into(), lengthscale),
                        ("sigma_y2".into(), noise.variance),
                    ],
                    trace: result.trace,
                    evaluations: result.evaluations,
                },
                prior: Arc::new(prior),
                noise,
            })
        }
    }
}

fn with_noise_starts(starts: Vec<Vec<f64>>, noise_starts: &[f64]) -> Vec<Vec<f64>> {
    if noise_starts.is_empty() {
        return starts;
    }
    let mut out = Vec::new();
    for &n in noise_starts {
        for s in &starts {
            let mut s = s.clone();
            s.push(n);
            out.push(s);
        }
    }
    out
}
