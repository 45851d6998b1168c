//! Greedy sequential selection of scan angles under a Gaussian-linear model.
//!
//! The state keeps the dense measurement covariance `Σ_yy` of the chosen
//! angles, its Cholesky factor (with diagonal jitter), and the rows
//! `Σ_xx aᵢ` for every chosen measurement row `aᵢ`. Posterior draws over the
//! unused angles then cost one prior draw plus a few dense products.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::prior::{symmetrise, PriorCovariance};
use crate::rng::{self, Rng};
use crate::tomo::{AngleSubset, TomoOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Expected information gain, `log det(σ_y² I + block)`.
    Eig,
    /// Expected squared error, `trace(block)`.
    Ese,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Eig => "eig",
            Objective::Ese => "ese",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eig" => Ok(Objective::Eig),
            "ese" => Ok(Objective::Ese),
            other => Err(Error::Argument(format!("unknown objective {other:?} (eig, ese)"))),
        }
    }
}

/// Diagonal jitter as a fraction of the mean diagonal of `Σ_yy`: starts at
/// `initial` and doubles on factorisation failure up to `max`. An initial
/// value of 0 tries the exact matrix first, then continues from 1%.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterPolicy {
    pub initial: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial: 0.01,
            max: 0.1,
        }
    }
}

impl JitterPolicy {
    pub fn none() -> Self {
        Self { initial: 0.0, max: 0.0 }
    }

    fn next(&self, current: f64) -> Option<f64> {
        let next = if current == 0.0 { 0.01 } else { 2.0 * current };
        (next <= self.max * (1.0 + 1e-12)).then_some(next)
    }
}

/// Factorises `matrix + ε·mean(diag)·I`, escalating `ε` per `policy`.
/// Returns the factor and the fraction used.
fn factorise_with_jitter(matrix: ArrayView2<'_, f64>, policy: &JitterPolicy, start: f64) -> Result<(Cholesky, f64)> {
    let mean_diag = matrix.diag().mean().unwrap_or(0.0).max(0.0);
    let mut fraction = start;
    loop {
        match Cholesky::new(matrix, fraction * mean_diag) {
            Ok(c) => return Ok((c, fraction)),
            Err(e @ Error::NotPositiveDefinite { .. }) => match policy.next(fraction) {
                Some(f) => fraction = f,
                None => return Err(e),
            },
            Err(e) => return Err(e),
        }
    }
}

/// Posterior bookkeeping for the chosen angles.
pub struct DesignState {
    op: Arc<TomoOperator>,
    prior: Arc<dyn PriorCovariance>,
    noise_variance: f64,
    chosen: AngleSubset,
    /// `A Σ_xx Aᵀ + σ_y² I`, without jitter.
    sigma_yy: Array2<f64>,
    chol: Cholesky,
    /// Row `i` is `Σ_xx aᵢ`.
    cross: Array2<f64>,
    policy: JitterPolicy,
    jitter_fraction: f64,
    jitter_trace: Vec<f64>,
    measurements: Vec<f64>,
    step: usize,
}

impl std::fmt::Debug for DesignState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DesignState")
            .field("chosen", &self.chosen)
            .field("prior", &self.prior.family())
            .field("noise_variance", &self.noise_variance)
            .field("jitter_fraction", &self.jitter_fraction)
            .field("step", &self.step)
            .finish()
    }
}

/// Builds `Σ_yy` for `pilot` from prior matvecs and factorises it.
pub fn init_state(
    prior: Arc<dyn PriorCovariance>,
    noise_variance: f64,
    op: Arc<TomoOperator>,
    pilot: AngleSubset,
    pilot_measurements: Option<Vec<f64>>,
    policy: JitterPolicy,
) -> Result<DesignState> {
    if pilot.is_empty() {
        return Err(Error::Argument("pilot scan needs at least one angle".into()));
    }
    if !(noise_variance >= 0.0) {
        return Err(Error::Argument(format!("noise variance must be >= 0, got {noise_variance}")));
    }
    crate::error::check_len("prior dimension", op.geometry().pixel_count(), prior.dim())?;
    let d_y = op.geometry().measurement_len(pilot.len());
    let measurements = match pilot_measurements {
        Some(m) => {
            crate::error::check_len("pilot measurements", d_y, m.len())?;
            m
        }
        None => Vec::new(),
    };
    let rows = op.rows_dense(&pilot)?;
    let cross = prior.matvec_rows(rows.view())?;
    drop(rows);
    let mut sigma_yy = op.forward_rows(&pilot, cross.view())?;
    symmetrise(&mut sigma_yy);
    sigma_yy.diag_mut().iter_mut().for_each(|d| *d += noise_variance);
    let (chol, fraction) = factorise_with_jitter(sigma_yy.view(), &policy, policy.initial)?;
    Ok(DesignState {
        op,
        prior,
        noise_variance,
        chosen: pilot,
        sigma_yy,
        chol,
        cross,
        policy,
        jitter_fraction: fraction,
        jitter_trace: vec![fraction],
        measurements,
        step: 0,
    })
}

impl DesignState {
    pub fn chosen(&self) -> &AngleSubset {
        &self.chosen
    }

    pub fn unused(&self) -> AngleSubset {
        self.chosen.complement(self.op.geometry().n_candidates())
    }

    pub fn operator(&self) -> &Arc<TomoOperator> {
        &self.op
    }

    pub fn prior(&self) -> &Arc<dyn PriorCovariance> {
        &self.prior
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// `Σ_yy` without jitter.
    pub fn sigma_yy(&self) -> ArrayView2<'_, f64> {
        self.sigma_yy.view()
    }

    pub fn factor(&self) -> &Cholesky {
        &self.chol
    }

    /// Absolute jitter added to the diagonal of `Σ_yy`.
    pub fn jitter(&self) -> f64 {
        self.chol.jitter()
    }

    /// Jitter fraction after initialisation and after every update.
    pub fn jitter_trace(&self) -> &[f64] {
        &self.jitter_trace
    }

    /// Measurements of the chosen angles, when supplied.
    pub fn measurements(&self) -> &[f64] {
        &self.measurements
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Replaces the prior and rebuilds every prior-dependent quantity for the
    /// current angle set.
    pub fn rebuild(&mut self, prior: Arc<dyn PriorCovariance>) -> Result<()> {
        let measurements = if self.measurements.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.measurements))
        };
        let mut fresh = init_state(
            prior,
            self.noise_variance,
            self.op.clone(),
            self.chosen.clone(),
            measurements,
            self.policy,
        )?;
        fresh.step = self.step;
        let mut trace = std::mem::take(&mut self.jitter_trace);
        trace.push(fresh.jitter_fraction);
        fresh.jitter_trace = trace;
        *self = fresh;
        Ok(())
    }

    /// Dense posterior covariance of the measurements at `angles`,
    /// `A_β (Σ_xx − Σ_xx Aᵀ Σ_yy⁻¹ A Σ_xx) A_βᵀ`, using the jittered factor.
    pub fn exact_block(&self, angle: usize) -> Result<Array2<f64>> {
        let single = AngleSubset::new(vec![angle], self.op.geometry().n_candidates())?;
        let rows = self.op.rows_dense(&single)?;
        let prior_rows = self.prior.matvec_rows(rows.view())?;
        let mut block = self.op.forward_rows(&single, prior_rows.view())?;
        // C = A Σ_xx A_βᵀ, d_y × d_p.
        let c = self.op.forward_rows(&self.chosen, prior_rows.view())?.reversed_axes();
        let mut solved = c.as_standard_layout().to_owned();
        self.chol.solve_columns(&mut solved);
        block -= &c.t().dot(&solved);
        symmetrise(&mut block);
        Ok(block)
    }
}

/// `K` posterior draws of the measurements at every unused angle.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSampleBatch {
    /// `K × (d_p · n_unused)`, per-angle chunks in `angles` order.
    pub samples: Array2<f64>,
    pub angles: Vec<usize>,
    pub detector_count: usize,
    pub seed: u64,
}

impl PseudoSampleBatch {
    pub fn k(&self) -> usize {
        self.samples.nrows()
    }

    /// The `K × d_p` columns belonging to `angle`.
    pub fn chunk(&self, angle: usize) -> Result<ArrayView2<'_, f64>> {
        let pos = self
            .angles
            .iter()
            .position(|&a| a == angle)
            .ok_or_else(|| Error::Argument(format!("angle {angle} is not in the sample batch")))?;
        let dp = self.detector_count;
        Ok(self.samples.slice(s![.., pos * dp..(pos + 1) * dp]))
    }
}

/// Matheron's rule: `Ā (x_k − Σ_xx Aᵀ Σ_yy⁻¹ (η_k + A x_k))` with
/// `x_k ~ N(0, Σ_xx)` and `η_k ~ N(0, (σ_y² + jitter) I)`, so that the draws
/// follow the posterior of the jittered model exactly.
pub fn matheron_samples(state: &DesignState, k: usize, seed: u64) -> Result<PseudoSampleBatch> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let unused = state.unused();
    if unused.is_empty() {
        return Err(Error::Argument("no unused angles left to sample".into()));
    }
    let mut rng = rng::stream(seed, 0x6d61_7468);
    let mut x = state.prior.sample(&mut rng, k)?;
    let mut r = state.op.forward_rows(&state.chosen, x.view())?;
    let eta_sd = (state.noise_variance + state.jitter()).sqrt();
    r.mapv_inplace(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + eta_sd * z
    });
    let mut w = r.reversed_axes().as_standard_layout().to_owned();
    state.chol.solve_columns(&mut w);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "Σ_yy solve produced non-finite values; increase the jitter".into(),
        ));
    }
    ndarray::linalg::general_mat_mul(-1.0, &w.t(), &state.cross, 1.0, &mut x);
    let samples = state.op.forward_rows(&unused, x.view())?;
    Ok(PseudoSampleBatch {
        samples,
        angles: unused.indices().to_vec(),
        detector_count: state.op.geometry().detector_count,
        seed,
    })
}

/// `K⁻¹ Σ_k y_k y_kᵀ` over the chunk of `angle`, exactly symmetric.
pub fn estimate_block(batch: &PseudoSampleBatch, angle: usize) -> Result<Array2<f64>> {
    let chunk = batch.chunk(angle)?;
    let mut block = chunk.t().dot(&chunk) / batch.k() as f64;
    symmetrise(&mut block);
    Ok(block)
}

/// `log det(σ_y² I + block)` after symmetrising `block`.
pub fn eig_score(block: ArrayView2<'_, f64>, noise_variance: f64) -> Result<f64> {
    let mut m = block.to_owned();
    symmetrise(&mut m);
    let chol = Cholesky::new(m.view(), noise_variance)?;
    let v = chol.logdet();
    if !v.is_finite() {
        return Err(Error::Numerical("EIG log-determinant is not finite".into()));
    }
    Ok(v)
}

/// `trace(block)`.
pub fn ese_score(block: ArrayView2<'_, f64>) -> f64 {
    block.diag().sum()
}

pub fn score_block(block: ArrayView2<'_, f64>, objective: Objective, noise_variance: f64) -> Result<f64> {
    match objective {
        Objective::Eig => eig_score(block, noise_variance),
        Objective::Ese => Ok(ese_score(block)),
    }
}

/// How per-angle posterior blocks are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockEstimator {
    /// Monte-Carlo estimate from Matheron samples.
    MonteCarlo,
    /// Dense evaluation; `d_p` prior matvecs per candidate.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScores {
    pub angles: Vec<usize>,
    pub values: Vec<f64>,
    pub objective: Objective,
    /// Samples used, 0 for exact blocks.
    pub k: usize,
}

/// Scores every unused angle.
pub fn score_candidates(
    state: &DesignState,
    objective: Objective,
    estimator: BlockEstimator,
    k: usize,
    seed: u64,
) -> Result<AcquisitionScores> {
    let sigma2 = state.noise_variance;
    match estimator {
        BlockEstimator::MonteCarlo => {
            let batch = matheron_samples(state, k, seed)?;
            let values = match objective {
                // Trace of the estimate is the mean squared chunk norm.
                Objective::Ese => {
                    let dp = batch.detector_count;
                    let sq = batch.samples.mapv(|v| v * v).sum_axis(Axis(0)) / k as f64;
                    sq.as_slice()
                        .expect("owned")
                        .chunks(dp)
                        .map(|c| c.iter().sum())
                        .collect()
                }
                Objective::Eig => batch
                    .angles
                    .iter()
                    .map(|&a| eig_score(estimate_block(&batch, a)?.view(), sigma2))
                    .collect::<Result<Vec<f64>>>()?,
            };
            Ok(AcquisitionScores {
                angles: batch.angles,
                values,
                objective,
                k,
            })
        }
        BlockEstimator::Exact => {
            let angles = state.unused().indices().to_vec();
            let values = angles
                .iter()
                .map(|&a| score_block(state.exact_block(a)?.view(), objective, sigma2))
                .collect::<Result<Vec<f64>>>()?;
            Ok(AcquisitionScores {
                angles,
                values,
                objective,
                k: 0,
            })
        }
    }
}

/// Argmax of the scores; ties go to the lowest angle index.
pub fn select_next(scores: &AcquisitionScores) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&a, &v) in scores.angles.iter().zip(&scores.values) {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("score of angle {a} is not finite")));
        }
        best = match best {
            Some((ba, bv)) if bv > v || (bv == v && ba < a) => Some((ba, bv)),
            _ => Some((a, v)),
        };
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::Argument("no candidate angles to select from".into()))
}

/// Adds `angle` to the chosen set, extending the factor by `d_p` rows.
pub fn update_state(state: &mut DesignState, angle: usize, measurements: Option<&[f64]>) -> Result<()> {
    let n = state.op.geometry().n_candidates();
    if angle >= n || state.chosen.contains(angle) {
        return Err(Error::Argument(format!("angle {angle} is not an unused candidate")));
    }
    let dp = state.op.geometry().detector_count;
    let single = AngleSubset::new(vec![angle], n)?;
    let rows = state.op.rows_dense(&single)?;
    let new_cross = state.prior.matvec_rows(rows.view())?;
    let off = state.op.forward_rows(&state.chosen, new_cross.view())?.reversed_axes();
    let mut corner = state.op.forward_rows(&single, new_cross.view())?;
    symmetrise(&mut corner);
    corner.diag_mut().iter_mut().for_each(|d| *d += state.noise_variance);

    let d_y = state.sigma_yy.nrows();
    let mut grown = Array2::<f64>::zeros((d_y + dp, d_y + dp));
    grown.slice_mut(s![..d_y, ..d_y]).assign(&state.sigma_yy);
    grown.slice_mut(s![..d_y, d_y..]).assign(&off);
    grown.slice_mut(s![d_y.., ..d_y]).assign(&off.t());
    grown.slice_mut(s![d_y.., d_y..]).assign(&corner);

    match state.chol.extend(off.view(), corner.view()) {
        Ok(()) => {}
        Err(Error::NotPositiveDefinite { .. }) => {
            let next = state.policy.next(state.jitter_fraction).ok_or_else(|| {
                Error::Numerical(format!(
                    "Σ_yy extension is indefinite at the maximum jitter fraction {}",
                    state.policy.max
                ))
            })?;
            let (chol, fraction) = factorise_with_jitter(grown.view(), &state.policy, next)?;
            state.chol = chol;
            state.jitter_fraction = fraction;
        }
        Err(e) => return Err(e),
    }
    state.sigma_yy = grown;
    state.cross.append(Axis(0), new_cross.view()).map_err(|e| Error::Numerical(e.to_string()))?;
    state.chosen.push(angle)?;
    match measurements {
        Some(m) => {
            crate::error::check_len("angle measurements", dp, m.len())?;
            state.measurements.extend_from_slice(m);
        }
        None => state.measurements.clear(),
    }
    state.jitter_trace.push(state.jitter_fraction);
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub objective: Objective,
    pub estimator: BlockEstimator,
    /// Matheron samples per step.
    pub k: usize,
    /// Angles to add beyond the pilot.
    pub steps: usize,
    /// Refresh the prior every this many steps (0 disables).
    pub retrain_every: usize,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Eig,
            estimator: BlockEstimator::MonteCarlo,
            k: 1000,
            steps: 15,
            retrain_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignStep {
    pub angle: usize,
    pub score: f64,
    pub scores: AcquisitionScores,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRun {
    /// Pilot followed by the selected angles.
    pub chosen: AngleSubset,
    pub pilot_len: usize,
    pub steps: Vec<DesignStep>,
    pub jitter_trace: Vec<f64>,
}

impl DesignRun {
    pub fn selected(&self) -> &[usize] {
        &self.chosen.indices()[self.pilot_len..]
    }
}

/// Source of measurements for newly chosen angles.
pub type MeasurementSource<'a> = dyn Fn(usize) -> Result<Option<Vec<f64>>> + 'a;

/// Hook that returns a refreshed prior after `retrain_every` steps.
pub type PriorRefresh<'a> = dyn FnMut(&DesignState) -> Result<Arc<dyn PriorCovariance>> + 'a;

/// Greedy design: score, select, update, for `config.steps` steps.
pub fn run_design(
    state: &mut DesignState,
    config: &DesignConfig,
    measure: &MeasurementSource<'_>,
    mut refresh: Option<&mut PriorRefresh<'_>>,
) -> Result<DesignRun> {
    let pilot_len = state.chosen.len();
    let mut steps = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let start = Instant::now();
        let seed = rng::derive_seed(config.seed, t as u64);
        let scores = score_candidates(state, config.objective, config.estimator, config.k, seed)?;
        let angle = select_next(&scores)?;
        let score = scores.values[scores.angles.iter().position(|&a| a == angle).expect("selected")];
        let m = measure(angle)?;
        update_state(state, angle, m.as_deref())?;
        if config.retrain_every > 0 && (t + 1) % config.retrain_every == 0 && t + 1 < config.steps {
            if let Some(hook) = refresh.as_deref_mut() {
                let prior = hook(state)?;
                state.rebuild(prior)?;
            }
        }
        steps.push(DesignStep {
            angle,
            score,
            scores,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(DesignRun {
        chosen: state.chosen.clone(),
        pilot_len,
        steps,
        jitter_trace: state.jitter_trace.clone(),
    })
}

/// Indices `⌊k·N/n⌋` for `k = 0..n`.
pub fn equidistant_design(n: usize, n_candidates: usize) -> Result<AngleSubset> {
    if n > n_candidates {
        return Err(Error::Argument(format!(
            "cannot choose {n} of {n_candidates} candidate angles"
        )));
    }
    AngleSubset::new((0..n).map(|k| k * n_candidates / n).collect(), n_candidates)
}

/// `n` angles drawn uniformly without replacement, in draw order.
pub fn random_design(n: usize, n_candidates: usize, seed: u64) -> Result<AngleSubset> {
    random_extension(&AngleSubset::default(), n, n_candidates, seed)
}

/// `base` followed by `n` further angles drawn uniformly from the rest.
pub fn random_extension(base: &AngleSubset, n: usize, n_candidates: usize, seed: u64) -> Result<AngleSubset> {
    let mut pool = base.complement(n_candidates).indices().to_vec();
    if n > pool.len() {
        return Err(Error::Argument(format!(
            "cannot draw {n} more angles from {} remaining",
            pool.len()
        )));
    }
    let mut rng: Rng = rng::stream(seed, 0x7261_6e64);
    pool.shuffle(&mut rng);
    let mut out = base.indices().to_vec();
    out.extend_from_slice(&pool[..n]);
    AngleSubset::new(out, n_candidates)
}

/// `step, angle_index, angle_deg, score` for every selected angle.
pub fn write_selected_csv(path: &Path, run: &DesignRun, angles_deg: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "angle_index", "angle_deg", "score"])?;
    for &a in &run.chosen.indices()[..run.pilot_len] {
        w.write_record(["0", &a.to_string(), &format!("{:.6}", angles_deg[a]), ""])?;
    }
    for (t, step) in run.steps.iter().enumerate() {
        w.write_record([
            (t + 1).to_string(),
            step.angle.to_string(),
            format!("{:.6}", angles_deg[step.angle]),
            format!("{:.10e}", step.score),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `step, angle_index, angle_deg, score` for every candidate at every step.
pub fn write_scores_csv(path: &Path, steps: &[DesignStep], angles_deg: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "angle_index", "angle_deg", "score"])?;
    for (t, step) in steps.iter().enumerate() {
        for (&a, &v) in step.scores.angles.iter().zip(&step.scores.values) {
            w.write_record([
                (t + 1).to_string(),
                a.to_string(),
                format!("{:.6}", angles_deg[a]),
                format!("{v:.10e}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}
