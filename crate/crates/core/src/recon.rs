//! Reconstruction and image-quality evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::linalg::{dot, norm_sq};
use crate::neural::{train_dip_observed, Network, TrainConfig};
use crate::operator::LinearOperator;
use crate::tv::{tv_exact, tv_smoothed};

/// Intensity range used for PSNR unless stated otherwise.
pub const DATA_RANGE: f64 = 1.0;

/// Exact anisotropic TV.
pub fn tv_value(x: &Image) -> f64 {
    tv_exact(x.data(), x.height(), x.width()).expect("image shape is consistent")
}

/// `10·log10(range² / MSE)`; `+∞` when the images are identical.
pub fn psnr(x: &Image, truth: &Image, data_range: f64) -> Result<f64> {
    if (x.height(), x.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape {
            context: "psnr images",
            expected: truth.len(),
            got: x.len(),
        });
    }
    if !(data_range > 0.0) {
        return Err(Error::Argument(format!("PSNR data range must be positive, got {data_range}")));
    }
    let mse = x
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TvSolver {
    /// Primal-dual hybrid gradient on the exact (non-smooth) objective.
    #[default]
    PrimalDual,
    /// Adam on the smoothed objective.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub solver: TvSolver,
    /// Adam step size, relative to the initial image's maximum magnitude.
    pub learning_rate: f64,
    /// `δ` for the smoothed TV used by gradient-based solvers.
    pub tv_smoothing: f64,
    /// Record the objective every this many iterations.
    pub record_every: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            iterations: 2000,
            solver: TvSolver::default(),
            learning_rate: 1e-3,
            tv_smoothing: 1e-6,
            record_every: 10,
        }
    }
}

impl ReconConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Argument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.record_every == 0 {
            return Err(Error::Argument("record_every must be positive".into()));
        }
        Ok(())
    }
}

/// `(λ, iterations)` by number of measured angles: the first entry whose
/// `max_angles` is at least the angle count applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub max_angles: usize,
    pub lambda: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<ScheduleEntry>);

impl Schedule {
    pub fn lookup(&self, n_angles: usize) -> Result<&ScheduleEntry> {
        self.0
            .iter()
            .find(|e| n_angles <= e.max_angles)
            .or(self.0.last())
            .ok_or_else(|| Error::Argument("empty reconstruction schedule".into()))
    }

    fn from_rows(rows: &[(usize, f64, usize)]) -> Self {
        Self(
            rows.iter()
                .map(|&(max_angles, lambda, iterations)| ScheduleEntry {
                    max_angles,
                    lambda,
                    iterations,
                })
                .collect(),
        )
    }

    /// TV reconstruction settings at 128×128 with 200 candidate angles.
    pub fn full_scale_tv(noise_pct: f64) -> Self {
        if noise_pct <= 0.05 {
            Self::from_rows(&[(5, 1e-2, 60_000), (15, 3e-3, 30_000), (30, 3e-3, 10_000), (40, 3e-3, 10_000)])
        } else {
            Self::from_rows(&[(5, 1e-2, 60_000), (15, 1e-2, 30_000), (30, 1e-2, 10_000), (40, 3e-3, 10_000)])
        }
    }

    /// DIP reconstruction settings at 128×128 with 200 candidate angles.
    pub fn full_scale_dip(noise_pct: f64) -> Self {
        if noise_pct <= 0.05 {
            Self::from_rows(&[(5, 3e-3, 19_000), (15, 3e-3, 9_400), (30, 3e-3, 12_000), (40, 1e-3, 13_000)])
        } else {
            Self::from_rows(&[(5, 1e-2, 11_000), (15, 1e-2, 7_500), (30, 3e-3, 12_000), (40, 3e-3, 7_100)])
        }
    }

    /// TV settings for 64×64 images with unit-pixel projections, selected on
    /// held-out phantoms.
    pub fn desk_tv(noise_pct: f64) -> Self {
        if noise_pct <= 0.05 {
            Self::from_rows(&[
                (5, 1.0, 5000),
                (15, 1.5, 5000),
                (20, 2.0, 5000),
                (30, 2.5, 5000),
                (usize::MAX, 3.0, 5000),
            ])
        } else {
            Self::from_rows(&[
                (5, 2.0, 5000),
                (15, 3.0, 5000),
                (20, 4.0, 5000),
                (30, 5.0, 5000),
                (usize::MAX, 6.0, 5000),
            ])
        }
    }

    /// DIP settings for 64×64 images, selected on held-out phantoms.
    pub fn desk_dip(noise_pct: f64) -> Self {
        if noise_pct <= 0.05 {
            Self::from_rows(&[(5, 1.0, 3000), (15, 1.0, 3000), (30, 1.0, 3000), (usize::MAX, 1.0, 3000)])
        } else {
            Self::from_rows(&[(5, 2.0, 3000), (15, 2.0, 3000), (30, 2.0, 3000), (usize::MAX, 2.0, 3000)])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub image: Image,
    /// `(iteration, objective)` at every recorded iteration.
    pub objective_trace: Vec<(usize, f64)>,
    /// PSNR of `image` against the ground truth, when one was given.
    pub psnr: Option<f64>,
    /// `(iteration, PSNR)` along the optimisation (DIP only).
    pub psnr_trace: Vec<(usize, f64)>,
    pub max_psnr: Option<f64>,
}

/// `‖A x − y‖² + λ TV(x)` with exact TV.
pub fn tv_objective(op: &dyn LinearOperator, y: &[f64], x: &Image, lambda: f64) -> Result<f64> {
    let mut r = op.forward(x.data())?;
    r.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
    Ok(norm_sq(&r) + lambda * tv_value(x))
}

/// Minimises `‖A x − y‖² + λ TV(x)`.
///
/// Starts from the better of the zero image and the adjoint image scaled by a
/// least-squares line search, and returns the best recorded iterate.
pub fn tv_reconstruct(
    op: &dyn LinearOperator,
    y: &[f64],
    height: usize,
    width: usize,
    config: &ReconConfig,
    truth: Option<&Image>,
) -> Result<ReconReport> {
    config.validate()?;
    check_len("tv data", op.measurement_len(), y.len())?;
    check_len("tv image", height * width, op.image_len())?;

    let back = op.adjoint(y)?;
    let proj = op.forward(&back)?;
    let denom = norm_sq(&proj);
    let alpha = if denom > 0.0 { dot(&proj, y) / denom } else { 0.0 };
    let scaled = Image::new(height, width, back.iter().map(|v| alpha * v).collect())?;
    let zero = Image::zeros(height, width);
    let f_scaled = tv_objective(op, y, &scaled, config.lambda)?;
    let f_zero = tv_objective(op, y, &zero, config.lambda)?;
    let (x0, f0) = if f_scaled <= f_zero {
        (scaled, f_scaled)
    } else {
        (zero, f_zero)
    };

    let mut tracker = Tracker::new(x0.clone(), f0);
    match config.solver {
        TvSolver::PrimalDual => primal_dual(op, y, x0, config, &mut tracker)?,
        TvSolver::Adam => adam(op, y, x0, config, &mut tracker)?,
    }
    tracker.finish(truth)
}

struct Tracker {
    best: Image,
    best_value: f64,
    trace: Vec<(usize, f64)>,
}

impl Tracker {
    fn new(x0: Image, f0: f64) -> Self {
        Self {
            best: x0,
            best_value: f0,
            trace: vec![(0, f0)],
        }
    }

    fn record(&mut self, iteration: usize, x: &Image, value: f64) -> Result<()> {
        if !value.is_finite() {
            self.trace.push((iteration, value));
            return Err(Error::Optimiser {
                message: format!("TV objective became non-finite at iteration {iteration}"),
                trace: self.trace.iter().map(|t| t.1).collect(),
            });
        }
        self.trace.push((iteration, value));
        if value < self.best_value {
            self.best_value = value;
            self.best = x.clone();
        }
        // Persistent increase: the last ten records all above ten times the start.
        let n = self.trace.len();
        if n > 10 && self.trace[n - 10..].iter().all(|t| t.1 > 10.0 * self.trace[0].1) {
            return Err(Error::Optimiser {
                message: format!("TV objective diverged by iteration {iteration}"),
                trace: self.trace.iter().map(|t| t.1).collect(),
            });
        }
        Ok(())
    }

    fn finish(self, truth: Option<&Image>) -> Result<ReconReport> {
        let psnr = truth.map(|t| psnr(&self.best, t, DATA_RANGE)).transpose()?;
        Ok(ReconReport {
            image: self.best,
            objective_trace: self.trace,
            psnr,
            psnr_trace: Vec::new(),
            max_psnr: psnr,
        })
    }
}

/// Largest singular value of `[A; D]` by power iteration, `D` the forward
/// differences.
fn operator_norm(op: &dyn LinearOperator, h: usize, w: usize) -> Result<f64> {
    let mut x: Vec<f64> = (0..h * w).map(|i| 1.0 + ((i * 7919) % 13) as f64 * 0.01).collect();
    let mut norm = 0.0;
    for _ in 0..30 {
        let n = norm_sq(&x).sqrt();
        x.iter_mut().for_each(|v| *v /= n);
        let ax = op.forward(&x)?;
        let mut z = op.adjoint(&ax)?;
        let (dv, dh) = grad(&x, h, w);
        let dt = grad_adjoint(&dv, &dh, h, w);
        z.iter_mut().zip(&dt).for_each(|(a, b)| *a += b);
        norm = norm_sq(&z).sqrt();
        x = z;
    }
    Ok(norm.sqrt())
}

/// Vertical and horizontal forward differences `x[i+1,j] − x[i,j]`, zero on
/// the last row/column.
fn grad(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dv = vec![0.0; h * w];
    let mut dh = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if r + 1 < h {
                dv[i] = x[i + w] - x[i];
            }
            if c + 1 < w {
                dh[i] = x[i + 1] - x[i];
            }
        }
    }
    (dv, dh)
}

fn grad_adjoint(dv: &[f64], dh: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if r + 1 < h {
                out[i + w] += dv[i];
                out[i] -= dv[i];
            }
            if c + 1 < w {
                out[i + 1] += dh[i];
                out[i] -= dh[i];
            }
        }
    }
    out
}

fn primal_dual(
    op: &dyn LinearOperator,
    y: &[f64],
    x0: Image,
    config: &ReconConfig,
    tracker: &mut Tracker,
) -> Result<()> {
    let (h, w) = (x0.height(), x0.width());
    let l = operator_norm(op, h, w)?.max(1e-12);
    let tau = 0.99 / l;
    let sigma = 0.99 / l;
    let lambda = config.lambda;
    let mut x = x0.into_data();
    let mut x_bar = x.clone();
    let mut p = vec![0.0; y.len()];
    let (mut qv, mut qh) = (vec![0.0; h * w], vec![0.0; h * w]);
    for it in 1..=config.iterations {
        // Dual step for the data term f(z) = ‖z − y‖².
        let ax = op.forward(&x_bar)?;
        for ((pi, a), yi) in p.iter_mut().zip(&ax).zip(y) {
            *pi = (*pi + sigma * a - sigma * yi) / (1.0 + sigma / 2.0);
        }
        // Dual step for λ‖D x‖₁: projection onto the λ-ball.
        let (dv, dh) = grad(&x_bar, h, w);
        for (q, d) in qv.iter_mut().zip(&dv).chain(qh.iter_mut().zip(&dh)) {
            *q = (*q + sigma * d).clamp(-lambda, lambda);
        }
        let mut step = op.adjoint(&p)?;
        let dt = grad_adjoint(&qv, &qh, h, w);
        step.iter_mut().zip(&dt).for_each(|(a, b)| *a += b);
        for ((xi, xb), s) in x.iter_mut().zip(x_bar.iter_mut()).zip(&step) {
            let new = *xi - tau * s;
            *xb = 2.0 * new - *xi;
            *xi = new;
        }
        if it % config.record_every == 0 || it == config.iterations {
            let img = Image::new(h, w, x.clone())?;
            let f = tv_objective(op, y, &img, lambda)?;
            tracker.record(it, &img, f)?;
        }
    }
    Ok(())
}

fn adam(
    op: &dyn LinearOperator,
    y: &[f64],
    x0: Image,
    config: &ReconConfig,
    tracker: &mut Tracker,
) -> Result<()> {
    let (h, w) = (x0.height(), x0.width());
    let scale = x0.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    let lr0 = config.learning_rate * scale;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut x = x0.into_data();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for it in 1..=config.iterations {
        let mut r = op.forward(&x)?;
        r.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
        let mut g = op.adjoint(&r)?;
        g.iter_mut().for_each(|gi| *gi *= 2.0);
        tv_smoothed(&x, h, w, config.tv_smoothing, config.lambda, &mut g)?;
        // Cosine decay keeps the late iterates from oscillating.
        let frac = it as f64 / config.iterations as f64;
        let lr = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()).max(1e-3);
        let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for j in 0..x.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            x[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
        if it % config.record_every == 0 || it == config.iterations {
            let img = Image::new(h, w, x.clone())?;
            let f = tv_objective(op, y, &img, config.lambda)?;
            tracker.record(it, &img, f)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipConfig {
    pub train: TrainConfig,
    /// PSNR is evaluated every this many iterations when ground truth is given.
    pub psnr_every: usize,
}

impl Default for DipConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            psnr_every: 100,
        }
    }
}

/// Reconstructs by fitting the network to `y`; with ground truth, reports the
/// PSNR trajectory and its maximum.
pub fn dip_reconstruct(
    network: &Network,
    op: &dyn LinearOperator,
    y: &[f64],
    config: &DipConfig,
    truth: Option<&Image>,
) -> Result<ReconReport> {
    let mut psnr_trace = Vec::new();
    let mut failure = None;
    let every = if truth.is_some() { config.psnr_every.max(1) } else { 0 };
    let mut last = None;
    let trained = train_dip_observed(network, op, y, &config.train, None, every, &mut |it, img| {
        if let Some(t) = truth {
            match psnr(img, t, DATA_RANGE) {
                Ok(p) => psnr_trace.push((it, p)),
                Err(e) => failure = Some(e),
            }
        }
        last = Some(img.clone());
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let image = match last {
        Some(img) => img,
        None => network.forward(&trained.theta)?,
    };
    let final_psnr = truth.map(|t| psnr(&image, t, DATA_RANGE)).transpose()?;
    let max_psnr = psnr_trace
        .iter()
        .map(|p| p.1)
        .chain(final_psnr)
        .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
    Ok(ReconReport {
        image,
        objective_trace: trained.loss_trace.iter().copied().enumerate().collect(),
        psnr: final_psnr,
        psnr_trace,
        max_psnr,
    })
}

/// One line of a PSNR table. `psnr` is `None` when the reconstruction was
/// skipped or failed; `status` says which.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub image: usize,
    pub method: String,
    pub objective: String,
    /// `tv` or `dip`.
    pub recon: String,
    pub angles: usize,
    #[serde(rename = "psnr_db")]
    pub psnr: Option<f64>,
    pub status: String,
}

pub fn write_psnr_csv(path: &Path, rows: &[PsnrRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "method", "objective", "recon", "angles", "psnr_db", "status"])?;
    for r in rows {
        // Shortest round-trip form, so summaries of a re-read table match.
        let p = r.psnr.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([
            r.image.to_string(),
            r.method.clone(),
            r.objective.clone(),
            r.recon.clone(),
            r.angles.to_string(),
            p,
            r.status.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_psnr_csv(path: &Path) -> Result<Vec<PsnrRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<PsnrRow>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::Identity;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn psnr_values() {
        let a = Image::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Image::new(2, 2, vec![0.1, 0.6, 1.1, 0.35]).unwrap();
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-10);
        assert!(psnr(&a, &Image::zeros(1, 4), 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut r = rng::stream(1, 0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..30).map(|_| r.random_range(0.0..1.0)).collect();
            let t: Vec<f64> = (0..30).map(|_| r.random_range(0.0..1.0)).collect();
            let mse: f64 = x.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 30.0;
            let oracle = -10.0 * mse.log10();
            let got = psnr(&Image::new(5, 6, x).unwrap(), &Image::new(5, 6, t).unwrap(), 1.0).unwrap();
            assert!((got - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn unregularised_identity_recovers_data() {
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        for solver in [TvSolver::PrimalDual, TvSolver::Adam] {
            let cfg = ReconConfig {
                lambda: 0.0,
                iterations: 400,
                solver,
                learning_rate: 1e-2,
                ..Default::default()
            };
            let rep = tv_reconstruct(&Identity(20), &y, 4, 5, &cfg, None).unwrap();
            let err = rep.image.data().iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{solver:?}: {err}");
        }
    }

    #[test]
    fn grad_adjointness() {
        let (h, w) = (4, 6);
        let mut r = rng::stream(2, 0);
        let x: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let (dv, dh) = grad(&x, h, w);
        let lhs = dot(&dv, &a) + dot(&dh, &b);
        let rhs = dot(&x, &grad_adjoint(&a, &b, h, w));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn denoising_beats_zero_and_start() {
        let (h, w) = (12, 12);
        let truth: Vec<f64> = (0..h * w).map(|i| if (i % w) < 6 { 0.2 } else { 0.8 }).collect();
        let mut r = rng::stream(3, 0);
        let y: Vec<f64> = truth.iter().map(|v| v + 0.1 * r.random_range(-1.0..1.0)).collect();
        for solver in [TvSolver::PrimalDual, TvSolver::Adam] {
            let cfg = ReconConfig {
                lambda: 0.1,
                iterations: 500,
                solver,
                learning_rate: 1e-2,
                ..Default::default()
            };
            let rep = tv_reconstruct(&Identity(h * w), &y, h, w, &cfg, None).unwrap();
            let f_final = tv_objective(&Identity(h * w), &y, &rep.image, 0.1).unwrap();
            assert!(f_final <= rep.objective_trace[0].1);
            assert!(f_final <= norm_sq(&y) + 0.1 * 0.0);
        }
    }

    #[test]
    fn schedule_lookup() {
        let s = Schedule::full_scale_tv(0.05);
        assert_eq!(s.lookup(5).unwrap().iterations, 60_000);
        assert_eq!(s.lookup(12).unwrap().lambda, 3e-3);
        assert_eq!(s.lookup(100).unwrap().max_angles, 40);
    }
}
