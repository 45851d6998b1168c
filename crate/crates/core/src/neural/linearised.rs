//! Weight-space priors and the image prior `x ~ N(0, J Σ_θ Jᵀ)` they induce
//! through a network Jacobian.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::jacobian::Jacobian;
use crate::error::{check_len, Error, Result};
use crate::linalg::norm_sq;
use crate::operator::LinearOperator;
use crate::optim::coordinate_search;
use crate::prior::{log_evidence_dense, EvidenceReport, FitOptions, NoiseModel, PriorCovariance};
use crate::rng::Rng;

/// Diagonal weight-space covariance `Σ_θ`.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaPrior {
    /// One variance per parameter block.
    BlockDiagonal {
        blocks: Vec<(String, Range<usize>)>,
        variances: Vec<f64>,
    },
    /// `Σ_θ = g · diag(s)⁻¹`.
    GPrior { g: f64, s: Vec<f64> },
}

impl ThetaPrior {
    pub fn block_diagonal(blocks: Vec<(String, Range<usize>)>, variances: Vec<f64>) -> Result<Self> {
        check_len("block variances", blocks.len(), variances.len())?;
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Argument(format!("block variance must be positive, got {v}")));
        }
        Ok(Self::BlockDiagonal { blocks, variances })
    }

    pub fn gprior(g: f64, s: Vec<f64>) -> Result<Self> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::NonPositiveG { g });
        }
        if let Some(v) = s.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Argument(format!("g-prior scale entries must be positive, got {v}")));
        }
        Ok(Self::GPrior { g, s })
    }

    /// Per-parameter variances, the diagonal of `Σ_θ`.
    pub fn variances(&self, n_params: usize) -> Result<Vec<f64>> {
        match self {
            Self::BlockDiagonal { blocks, variances } => {
                let mut out = vec![f64::NAN; n_params];
                for ((_, range), &v) in blocks.iter().zip(variances) {
                    if range.end > n_params {
                        return Err(Error::Argument(format!(
                            "parameter block {range:?} exceeds d_theta = {n_params}"
                        )));
                    }
                    out[range.clone()].iter_mut().for_each(|o| *o = v);
                }
                if out.iter().any(|v| v.is_nan()) {
                    return Err(Error::Argument("parameter blocks do not cover every weight".into()));
                }
                Ok(out)
            }
            Self::GPrior { g, s } => {
                check_len("g-prior scale", n_params, s.len())?;
                Ok(s.iter().map(|sj| g / sj).collect())
            }
        }
    }

    pub fn hyperparameters(&self) -> Vec<(String, f64)> {
        match self {
            Self::BlockDiagonal { blocks, variances } => blocks
                .iter()
                .zip(variances)
                .map(|((name, _), &v)| (format!("var_{name}"), v))
                .collect(),
            Self::GPrior { g, .. } => vec![("g".into(), *g)],
        }
    }
}

/// `G = A J` (`d_y × d_θ`), one vector-Jacobian product per measurement.
pub fn measurement_jacobian(jac: &dyn Jacobian, op: &dyn LinearOperator) -> Result<Array2<f64>> {
    check_len("jacobian vs operator", op.image_len(), jac.n_pixels())?;
    jac.vjp_rows(op.rows_dense()?.view())
}

/// The g-prior scale vector with its flooring record.
#[derive(Debug, Clone, PartialEq)]
pub struct GPriorScale {
    pub s: Vec<f64>,
    /// Entries raised to the floor `1e-12 · mean(s)`.
    pub floored: usize,
    pub floor: f64,
}

impl GPriorScale {
    /// Parameters whose scale was not floored.
    pub fn active(&self) -> usize {
        self.s.len() - self.floored
    }
}

/// `s_j = d_y⁻¹ Σ_i [A J]²_ij`. Depends only on the operator, never on data.
pub fn compute_gprior_scale(jac: &dyn Jacobian, op: &dyn LinearOperator) -> Result<GPriorScale> {
    let d_y = op.measurement_len();
    if d_y == 0 {
        return Err(Error::Argument("g-prior scale needs at least one measurement".into()));
    }
    let mut s = vec![0.0; jac.n_params()];
    // Row by row so that G is never held in memory.
    for row in op.rows_dense()?.outer_iter() {
        let g = jac.vjp(&row.to_vec())?;
        for (sj, gj) in s.iter_mut().zip(&g) {
            *sj += gj * gj;
        }
    }
    s.iter_mut().for_each(|v| *v /= d_y as f64);
    floor_scale(s)
}

fn floor_scale(mut s: Vec<f64>) -> Result<GPriorScale> {
    let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
    let floor = 1e-12 * mean;
    if !(floor > 0.0) {
        return Err(Error::Numerical("Jacobian of the measured angles is identically zero".into()));
    }
    let mut floored = 0;
    for v in &mut s {
        if *v < floor {
            *v = floor;
            floored += 1;
        }
    }
    Ok(GPriorScale { s, floored, floor })
}

/// `g = (d_y d_θ)⁻¹ Σ_i (y_i² − σ_y²)`. Not checked for sign here; a
/// non-positive value is rejected by [`ThetaPrior::gprior`].
pub fn compute_g(y: &[f64], noise_variance: f64, n_params: usize) -> f64 {
    let excess: f64 = y.iter().map(|v| v * v - noise_variance).sum();
    excess / (y.len() as f64 * n_params as f64)
}

/// Image prior `N(0, J Σ_θ Jᵀ)` with diagonal `Σ_θ`.
#[derive(Clone)]
pub struct LinearisedPrior {
    jac: Arc<dyn Jacobian>,
    theta_prior: ThetaPrior,
    variances: Vec<f64>,
}

impl std::fmt::Debug for LinearisedPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearisedPrior")
            .field("n_params", &self.jac.n_params())
            .field("theta_prior", &self.theta_prior.hyperparameters())
            .finish()
    }
}

impl LinearisedPrior {
    pub fn new(jac: Arc<dyn Jacobian>, theta_prior: ThetaPrior) -> Result<Self> {
        let variances = theta_prior.variances(jac.n_params())?;
        Ok(Self {
            jac,
            theta_prior,
            variances,
        })
    }

    pub fn jacobian(&self) -> &Arc<dyn Jacobian> {
        &self.jac
    }

    pub fn theta_prior(&self) -> &ThetaPrior {
        &self.theta_prior
    }

    /// `J Σ_θ Jᵀ v`
    pub fn lin_dip_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.jac.vjp(v)?;
        g.iter_mut().zip(&self.variances).for_each(|(gj, vj)| *gj *= vj);
        self.jac.jvp(&g)
    }
}

impl PriorCovariance for LinearisedPrior {
    fn dim(&self) -> usize {
        self.jac.n_pixels()
    }

    fn matvec_rows(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut g = self.jac.vjp_rows(vs)?;
        let var = ndarray::ArrayView1::from(&self.variances);
        g *= &var;
        self.jac.jvp_rows(g.view())
    }

    fn sample(&self, rng: &mut Rng, k: usize) -> Result<Array2<f64>> {
        let mut eps = Array2::<f64>::zeros((k, self.variances.len()));
        for mut row in eps.outer_iter_mut() {
            for (e, v) in row.iter_mut().zip(&self.variances) {
                let z: f64 = StandardNormal.sample(rng);
                *e = v.sqrt() * z;
            }
        }
        self.jac.jvp_rows(eps.view())
    }

    fn hyperparameters(&self) -> Vec<(String, f64)> {
        self.theta_prior.hyperparameters()
    }

    fn family(&self) -> &'static str {
        match self.theta_prior {
            ThetaPrior::BlockDiagonal { .. } => "lindip-block",
            ThetaPrior::GPrior { .. } => "lindip-gprior",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FittedGPrior {
    pub prior: ThetaPrior,
    pub scale: GPriorScale,
    pub noise: NoiseModel,
    pub report: EvidenceReport,
}

/// g-prior for the pilot data. `s` comes from `A J` alone; `σ_y²` maximises
/// the evidence with `g` tied to it by the second-moment rule (unless pinned),
/// so the average marginal measurement variance always equals `mean(y²)`.
///
/// `g` is normalised by the number of unfloored parameters.
pub fn fit_gprior(
    jac: &dyn Jacobian,
    op: &dyn LinearOperator,
    y: &[f64],
    options: &FitOptions,
) -> Result<FittedGPrior> {
    check_len("pilot measurements", op.measurement_len(), y.len())?;
    let d_y = y.len();
    if d_y == 0 {
        return Err(Error::Argument("g-prior fit needs at least one measurement".into()));
    }
    let mut g_mat = measurement_jacobian(jac, op)?;
    let s: Vec<f64> = g_mat.axis_iter(Axis(1)).map(|c| norm_sq(&c.to_vec()) / d_y as f64).collect();
    let scale = floor_scale(s)?;
    for (mut col, sj) in g_mat.axis_iter_mut(Axis(1)).zip(&scale.s) {
        col /= sj.sqrt();
    }
    let gram = g_mat.dot(&g_mat.t());
    drop(g_mat);

    let second_moment = norm_sq(y) / d_y as f64;
    let active = scale.active();
    let g_of = |noise: f64| compute_g(y, noise, active);
    let objective = |x: &[f64]| {
        let noise = x[0].exp();
        log_evidence_dense((&gram * g_of(noise)).view(), noise, y)
    };
    let (noise, log_evidence, initial, trace, evaluations) = match options.pin_noise {
        Some(v) => {
            NoiseModel::new(v)?;
            let e = objective(&[v.ln()])?;
            (v, e, e, vec![e], 1)
        }
        None => {
            let log_m2 = second_moment.ln();
            let bounds = [(log_m2 - 30.0, log_m2 + (1.0 - 1e-9f64).ln())];
            let starts = [vec![(1e-2 * second_moment).ln()], vec![(1e-4 * second_moment).ln()]];
            let r = coordinate_search(objective, &starts, &bounds, &options.search)?;
            (r.x[0].exp(), r.value, r.initial_value, r.trace, r.evaluations)
        }
    };
    let noise = NoiseModel::new(noise)?;
    let prior = ThetaPrior::gprior(g_of(noise.variance), scale.s.clone())?;
    let mut hyperparameters = prior.hyperparameters();
    hyperparameters.push(("sigma_y2".into(), noise.variance));
    hyperparameters.push(("floored".into(), scale.floored as f64));
    Ok(FittedGPrior {
        prior,
        scale,
        noise,
        report: EvidenceReport {
            log_evidence,
            initial_log_evidence: initial,
            hyperparameters,
            trace,
            evaluations,
        },
    })
}

#[derive(Debug, Clone)]
pub struct FittedBlockPrior {
    pub prior: ThetaPrior,
    pub noise: NoiseModel,
    pub report: EvidenceReport,
}

/// Per-block Gram matrices `G_b G_bᵀ` of `G = A J`.
pub fn block_grams(g: ArrayView2<'_, f64>, blocks: &[(String, Range<usize>)]) -> Vec<Array2<f64>> {
    blocks
        .iter()
        .map(|(_, r)| {
            let gb = g.slice_axis(Axis(1), (r.start..r.end).into());
            gb.dot(&gb.t())
        })
        .collect()
}

/// Block variances (and `σ_y²` unless pinned) maximising the log evidence of
/// the pilot data under `Σ_yy = Σ_b σ_b G_b G_bᵀ + σ_y² I`.
pub fn fit_block_prior(
    jac: &dyn Jacobian,
    op: &dyn LinearOperator,
    y: &[f64],
    options: &FitOptions,
) -> Result<FittedBlockPrior> {
    check_len("pilot measurements", op.measurement_len(), y.len())?;
    let blocks = jac.blocks();
    let g = measurement_jacobian(jac, op)?;
    let grams = block_grams(g.view(), &blocks);
    drop(g);
    fit_block_variances(&grams, blocks, y, options)
}

/// [`fit_block_prior`] on precomputed block Gram matrices.
pub fn fit_block_variances(
    grams: &[Array2<f64>],
    blocks: Vec<(String, Range<usize>)>,
    y: &[f64],
    options: &FitOptions,
) -> Result<FittedBlockPrior> {
    check_len("block grams", blocks.len(), grams.len())?;
    let second_moment = norm_sq(y) / y.len().max(1) as f64;
    if !(second_moment > 0.0) {
        return Err(Error::Argument("pilot measurements are identically zero".into()));
    }
    let nb = grams.len();
    let total_diag: f64 = grams.iter().map(|m| m.diag().mean().unwrap_or(0.0)).sum();
    if !(total_diag > 0.0) {
        return Err(Error::Numerical("measurement Jacobian is identically zero".into()));
    }
    let v0 = (second_moment / total_diag).ln();
    let log_m2 = second_moment.ln();
    let base = vec![v0; nb];
    let mut bounds = vec![(v0 - 30.0, v0 + 30.0); nb];
    let starts: Vec<Vec<f64>> = match options.pin_noise {
        Some(v) => {
            NoiseModel::new(v)?;
            vec![base]
        }
        None => {
            bounds.push((log_m2 - 30.0, log_m2 + 10.0));
            [1e-2, 1e-4]
                .iter()
                .map(|r| {
                    let mut s = base.clone();
                    s.push((r * second_moment).ln());
                    s
                })
                .collect()
        }
    };
    let noise_of = |x: &[f64]| options.pin_noise.unwrap_or_else(|| x[nb].exp());
    let n = y.len();
    let objective = |x: &[f64]| {
        let mut cov = Array2::<f64>::zeros((n, n));
        for (m, &lv) in grams.iter().zip(x) {
            cov.scaled_add(lv.exp(), m);
        }
        log_evidence_dense(cov.view(), noise_of(x), y)
    };
    let result = coordinate_search(objective, &starts, &bounds, &options.search)?;
    let variances: Vec<f64> = result.x[..nb].iter().map(|v| v.exp()).collect();
    let noise = NoiseModel::new(noise_of(&result.x))?;
    let prior = ThetaPrior::block_diagonal(blocks, variances)?;
    let mut hyperparameters = prior.hyperparameters();
    hyperparameters.push(("sigma_y2".into(), noise.variance));
    Ok(FittedBlockPrior {
        prior,
        noise,
        report: EvidenceReport {
            log_evidence: result.value,
            initial_log_evidence: result.initial_value,
            hyperparameters,
            trace: result.trace,
            evaluations: result.evaluations,
        },
    })
}
