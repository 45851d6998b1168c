//! End-to-end experiments: dataset, pilot scan, prior fitting, one design per
//! method and objective, and reconstruction quality at regular angle counts.
//!
//! Every stage is a deterministic function of the config, so the CLI stages
//! can be run separately or all at once.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::design::{
    equidistant_design, init_state, random_extension, run_design, write_scores_csv,
    write_selected_csv, BlockEstimator, DesignConfig, DesignRun, DesignState, DesignStep,
    JitterPolicy, Objective, PriorRefresh,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io;
use crate::neural::{
    compute_gprior_scale, fit_block_prior, fit_gprior, save_checkpoint, train_dip, FittedBlockPrior,
    FittedGPrior, LinearisedPrior, Network, NetworkJacobian, NetworkSpec, ThetaPrior, TrainConfig,
    TrainedNetwork,
};
use crate::operator::SubsetOperator;
use crate::phantom::{sample_phantom, simulate_measurements, NoisySinogram, Phantom, PhantomSpec};
use crate::prior::{fit_hyperparameters, FitOptions, FittedModel, PriorCovariance, PriorFamily};
use crate::recon::{
    dip_reconstruct, psnr, tv_reconstruct, write_psnr_csv, DipConfig, PsnrRow, ReconConfig,
    Schedule, TvSolver, DATA_RANGE,
};
use crate::rng::derive_seed;
use crate::tomo::{build_geometry, default_detector_count, AngleSubset, TomoOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Isotropic,
    Matern,
    LindipBlock,
    LindipGprior,
    LindipGpriorRetrain,
    Equidistant,
    Random,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Isotropic,
        Method::Matern,
        Method::LindipBlock,
        Method::LindipGprior,
        Method::LindipGpriorRetrain,
        Method::Equidistant,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Isotropic => "isotropic",
            Method::Matern => "matern",
            Method::LindipBlock => "lindip-block",
            Method::LindipGprior => "lindip-gprior",
            Method::LindipGpriorRetrain => "lindip-gprior-retrain",
            Method::Equidistant => "equidistant",
            Method::Random => "random",
        }
    }

    /// Baselines ignore the objective.
    pub fn is_baseline(self) -> bool {
        matches!(self, Method::Equidistant | Method::Random)
    }

    pub fn uses_network(self) -> bool {
        matches!(
            self,
            Method::LindipBlock | Method::LindipGprior | Method::LindipGpriorRetrain
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }
}

/// Everything that defines a run. Serialised as TOML; angles are candidate
/// indices, noise is a fraction of the mean absolute clean measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Image height and width in pixels (copied into `phantom` and `network`).
    pub height: usize,
    pub width: usize,
    /// Candidate angles spread over [0°, 180°).
    pub n_candidates: usize,
    /// Detector pixels per angle; 0 selects the default for the image size.
    pub detector_count: usize,
    pub noise_pct: f64,
    /// Equidistant pilot angles.
    pub pilot: usize,
    /// Angles added after the pilot.
    pub steps: usize,
    /// Evaluate after every this many added angles.
    pub cadence: usize,
    pub n_images: usize,
    /// Index of the first image; images are independent of how many run.
    pub first_image: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub objectives: Vec<Objective>,
    /// Matheron samples per step for the isotropic and Matérn priors.
    pub k: usize,
    /// Matheron samples per step for the linearised priors.
    pub k_network: usize,
    /// Refit the network and `s` every this many angles (retrain method only).
    pub retrain_every: usize,
    pub retrain_iterations: usize,
    /// Retraining continues from the previous parameters instead of a fresh
    /// initialisation.
    pub warm_start: bool,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub tv_solver: TvSolver,
    /// TV `(λ, iterations)` by angle count; empty selects the built-in
    /// schedule for the noise level.
    pub tv_schedule: Vec<crate::recon::ScheduleEntry>,
    /// Also evaluate DIP reconstructions (slow).
    pub evaluate_dip: bool,
    pub dip_schedule: Vec<crate::recon::ScheduleEntry>,
    pub dip_learning_rate: f64,
    pub phantom: PhantomSpec,
    pub network: NetworkSpec,
    /// Network fit to the pilot scan.
    pub pilot_training: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_candidates: 100,
            detector_count: 0,
            noise_pct: 0.05,
            pilot: 5,
            steps: 15,
            cadence: 5,
            n_images: 10,
            first_image: 0,
            seed: 0,
            methods: Method::ALL.to_vec(),
            objectives: vec![Objective::Eig, Objective::Ese],
            k: 1000,
            k_network: 256,
            retrain_every: 5,
            retrain_iterations: 500,
            warm_start: true,
            threads: 0,
            out_dir: PathBuf::from("runs/desk"),
            tv_solver: TvSolver::default(),
            tv_schedule: Vec::new(),
            evaluate_dip: false,
            dip_schedule: Vec::new(),
            dip_learning_rate: 1e-3,
            phantom: PhantomSpec::default(),
            network: NetworkSpec {
                channels: 16,
                ..Default::default()
            },
            pilot_training: TrainConfig {
                lambda: 1.0,
                iterations: 3000,
                learning_rate: 3e-3,
                ..Default::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: Some(path.to_owned()),
            message: e.to_string(),
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config {
            path: Some(path.to_owned()),
            message: e.to_string(),
        })?;
        cfg.resolved().map_err(|e| match e {
            Error::Config { message, .. } => Error::Config {
                path: Some(path.to_owned()),
                message,
            },
            other => other,
        })
    }

    /// Copies the image size into the nested specs and checks consistency.
    pub fn resolved(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::Config { path: None, message: m });
        self.phantom.height = self.height;
        self.phantom.width = self.width;
        self.network.height = self.height;
        self.network.width = self.width;
        if self.detector_count == 0 {
            self.detector_count = default_detector_count(self.height, self.width);
        }
        if self.pilot == 0 || self.pilot > self.n_candidates {
            return bad(format!("pilot must be in 1..={}", self.n_candidates));
        }
        if self.pilot + self.steps > self.n_candidates {
            return bad("pilot + steps exceeds the number of candidate angles".into());
        }
        if self.cadence == 0 || self.steps % self.cadence != 0 {
            return bad(format!("cadence {} must divide steps {}", self.cadence, self.steps));
        }
        if !(self.noise_pct >= 0.0) {
            return bad("noise_pct must be >= 0".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.objectives.is_empty() && self.methods.iter().any(|m| !m.is_baseline()) {
            return bad("model-based methods need at least one objective".into());
        }
        let mut seen = Vec::new();
        for m in &self.methods {
            if seen.contains(m) {
                return bad(format!("method {m} listed twice"));
            }
            seen.push(*m);
        }
        if self.methods.iter().any(|m| m.uses_network()) && self.k_network == 0 {
            return bad("k_network must be positive".into());
        }
        if self.methods.iter().any(|m| matches!(m, Method::Isotropic | Method::Matern)) && self.k == 0 {
            return bad("k must be positive".into());
        }
        let nested = self.phantom.validate().and_then(|_| self.network.validate());
        if let Err(e) = nested {
            return bad(e.to_string());
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: None,
            message: e.to_string(),
        })
    }

    /// Angle counts at which reconstructions are evaluated.
    pub fn evaluation_points(&self) -> Vec<usize> {
        (0..=self.steps / self.cadence)
            .map(|i| self.pilot + i * self.cadence)
            .collect()
    }

    pub fn image_indices(&self) -> std::ops::Range<usize> {
        self.first_image..self.first_image + self.n_images
    }

    pub fn tv_schedule(&self) -> Schedule {
        if self.tv_schedule.is_empty() {
            Schedule::desk_tv(self.noise_pct)
        } else {
            Schedule(self.tv_schedule.clone())
        }
    }

    pub fn dip_schedule(&self) -> Schedule {
        if self.dip_schedule.is_empty() {
            Schedule::desk_dip(self.noise_pct)
        } else {
            Schedule(self.dip_schedule.clone())
        }
    }

    pub fn operator(&self) -> Result<TomoOperator> {
        Ok(TomoOperator::new(build_geometry(
            self.height,
            self.width,
            self.n_candidates,
            self.detector_count,
        )?))
    }

    /// `(method, objective)` cells in config order; baselines get no objective.
    pub fn cells(&self) -> Vec<(Method, Option<Objective>)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m.is_baseline() {
                out.push((m, None));
            } else {
                out.extend(self.objectives.iter().map(|&o| (m, Some(o))));
            }
        }
        out
    }

    fn image_seed(&self, image: usize) -> u64 {
        derive_seed(self.seed, image as u64)
    }
}

/// A phantom and its noisy sinogram over every candidate angle.
#[derive(Debug, Clone)]
pub struct ImageData {
    pub index: usize,
    pub phantom: Phantom,
    /// Noise is calibrated on the full candidate sinogram, so every design
    /// sees the same noise level and the same realisation at each angle.
    pub sinogram: NoisySinogram,
    pub detector_count: usize,
}

impl ImageData {
    /// Measurements of `subset`, in subset order.
    pub fn measurements(&self, subset: &AngleSubset) -> Vec<f64> {
        let dp = self.detector_count;
        subset
            .indices()
            .iter()
            .flat_map(|&a| self.sinogram.y[a * dp..(a + 1) * dp].iter().copied())
            .collect()
    }

    pub fn truth(&self) -> &Image {
        &self.phantom.image
    }
}

pub fn generate_image(cfg: &ExperimentConfig, op: &TomoOperator, image: usize) -> Result<ImageData> {
    generate_image_with_noise_seed(cfg, op, image, derive_seed(cfg.image_seed(image), 1))
}

/// Same phantom as [`generate_image`] with a different noise realisation.
pub fn generate_image_with_noise_seed(
    cfg: &ExperimentConfig,
    op: &TomoOperator,
    image: usize,
    noise_seed: u64,
) -> Result<ImageData> {
    let phantom = sample_phantom(&cfg.phantom, derive_seed(cfg.image_seed(image), 0))?;
    let all = AngleSubset::new((0..cfg.n_candidates).collect(), cfg.n_candidates)?;
    let sinogram = simulate_measurements(op, phantom.image.data(), &all, cfg.noise_pct, noise_seed, false)?;
    Ok(ImageData {
        index: image,
        phantom,
        sinogram,
        detector_count: op.geometry().detector_count,
    })
}

/// The network fit to the pilot scan, with its Jacobian at `θ*`.
pub struct PilotNetwork {
    pub network: Network,
    pub trained: TrainedNetwork,
    pub jacobian: Arc<NetworkJacobian>,
}

/// Pilot-scan fits for one image. Each entry is present only when a
/// configured method needs it; a failed fit is kept as its error message.
#[derive(Default)]
pub struct PilotFits {
    pub pilot: AngleSubset,
    pub isotropic: Option<Result<FittedModel, String>>,
    pub matern: Option<Result<FittedModel, String>>,
    pub network: Option<Result<PilotNetwork, String>>,
    pub block: Option<Result<FittedBlockPrior, String>>,
    pub gprior: Option<Result<FittedGPrior, String>>,
}

pub fn pilot_subset(cfg: &ExperimentConfig) -> Result<AngleSubset> {
    equidistant_design(cfg.pilot, cfg.n_candidates)
}

pub fn fit_pilot(cfg: &ExperimentConfig, op: &TomoOperator, data: &ImageData) -> Result<PilotFits> {
    let pilot = pilot_subset(cfg)?;
    let y = data.measurements(&pilot);
    let sub = SubsetOperator::new(op, &pilot);
    let has = |m: Method| cfg.methods.contains(&m);
    let options = FitOptions::default();
    let mut fits = PilotFits {
        pilot: pilot.clone(),
        ..Default::default()
    };
    if has(Method::Isotropic) {
        fits.isotropic = Some(
            fit_hyperparameters(PriorFamily::Isotropic, &sub, &y, cfg.height, cfg.width, &options)
                .map_err(|e| e.to_string()),
        );
    }
    if has(Method::Matern) {
        fits.matern = Some(
            fit_hyperparameters(PriorFamily::Matern12, &sub, &y, cfg.height, cfg.width, &options)
                .map_err(|e| e.to_string()),
        );
    }
    if cfg.methods.iter().any(|m| m.uses_network()) {
        let net = (|| -> Result<PilotNetwork> {
            let network = Network::new(&cfg.network)?;
            let mut train = cfg.pilot_training.clone();
            train.seed = derive_seed(cfg.image_seed(data.index), 2);
            let trained = train_dip(&network, &sub, &y, &train, None)?;
            let jacobian = Arc::new(NetworkJacobian::new(network.clone(), trained.theta.clone())?);
            Ok(PilotNetwork {
                network,
                trained,
                jacobian,
            })
        })()
        .map_err(|e| e.to_string());
        if let Ok(n) = &net {
            if has(Method::LindipBlock) {
                fits.block = Some(fit_block_prior(n.jacobian.as_ref(), &sub, &y, &options).map_err(|e| e.to_string()));
            }
            if has(Method::LindipGprior) || has(Method::LindipGpriorRetrain) {
                fits.gprior = Some(fit_gprior(n.jacobian.as_ref(), &sub, &y, &options).map_err(|e| e.to_string()));
            }
        }
        fits.network = Some(net);
    }
    Ok(fits)
}

/// Writes fitted hyperparameters (and the pilot network) for one image.
pub fn write_fits(dir: &Path, image: usize, fits: &PilotFits) -> Result<()> {
    let mut table = io::Header::new();
    let mut put = |name: &str, hyper: Result<(Vec<(String, f64)>, f64), String>| {
        let mut t = io::Header::new();
        match hyper {
            Ok((h, evidence)) => {
                for (k, v) in h {
                    t.insert(k, toml::Value::Float(v));
                }
                t.insert("log_evidence".into(), toml::Value::Float(evidence));
            }
            Err(e) => {
                t.insert("error".into(), toml::Value::String(e));
            }
        }
        table.insert(name.into(), toml::Value::Table(t));
    };
    let model = |f: &Result<FittedModel, String>| {
        f.as_ref()
            .map(|m| (m.report.hyperparameters.clone(), m.report.log_evidence))
            .map_err(Clone::clone)
    };
    if let Some(f) = &fits.isotropic {
        put("isotropic", model(f));
    }
    if let Some(f) = &fits.matern {
        put("matern", model(f));
    }
    if let Some(f) = &fits.block {
        put(
            "lindip-block",
            f.as_ref()
                .map(|m| (m.report.hyperparameters.clone(), m.report.log_evidence))
                .map_err(Clone::clone),
        );
    }
    if let Some(f) = &fits.gprior {
        put(
            "lindip-gprior",
            f.as_ref()
                .map(|m| (m.report.hyperparameters.clone(), m.report.log_evidence))
                .map_err(Clone::clone),
        );
    }
    if let Some(Ok(n)) = &fits.network {
        save_checkpoint(&dir.join(format!("image{image:03}_network.f64")), &n.network, &n.trained)?;
        let mut t = io::Header::new();
        t.insert("final_loss".into(), toml::Value::Float(n.trained.final_loss));
        t.insert("n_params".into(), toml::Value::Integer(n.network.n_params() as i64));
        table.insert("network".into(), toml::Value::Table(t));
    } else if let Some(Err(e)) = &fits.network {
        let mut t = io::Header::new();
        t.insert("error".into(), toml::Value::String(e.clone()));
        table.insert("network".into(), toml::Value::Table(t));
    }
    io::write_table(&dir.join(format!("image{image:03}_fits.toml")), &table)
}

/// Angle sets evaluated for one cell, one per evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDesign {
    /// Full acquisition order for sequential designs (pilot first).
    pub sequence: Option<DesignRun>,
    pub sets: Vec<AngleSubset>,
    pub seed: u64,
    /// Matheron samples per step; 0 for the baselines.
    pub k: usize,
    /// Prior family and hyperparameters used by a sequential design.
    pub prior: Option<(String, Vec<(String, f64)>)>,
}

fn prefixes(cfg: &ExperimentConfig, sequence: &AngleSubset) -> Result<Vec<AngleSubset>> {
    cfg.evaluation_points()
        .into_iter()
        .map(|n| AngleSubset::new(sequence.indices()[..n].to_vec(), cfg.n_candidates))
        .collect()
}

fn fitted<'a, T>(fit: &'a Option<Result<T, String>>, what: &str) -> Result<&'a T> {
    match fit {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(Error::Numerical(format!("{what} fit failed: {e}"))),
        None => Err(Error::Argument(format!("{what} was not fitted"))),
    }
}

/// Runs one method (and objective) on one image.
pub fn design_cell(
    cfg: &ExperimentConfig,
    op: &Arc<TomoOperator>,
    data: &ImageData,
    fits: &PilotFits,
    method: Method,
    objective: Option<Objective>,
) -> Result<CellDesign> {
    let n = cfg.n_candidates;
    let cell_seed = derive_seed(cfg.image_seed(data.index), 0x100 + method as u64 * 8 + objective.map_or(0, |o| o as u64 + 1));
    match method {
        Method::Equidistant => Ok(CellDesign {
            sequence: None,
            seed: cell_seed,
            k: 0,
            prior: None,
            sets: cfg
                .evaluation_points()
                .into_iter()
                .map(|k| equidistant_design(k, n))
                .collect::<Result<_>>()?,
        }),
        Method::Random => {
            let seq = random_extension(&fits.pilot, cfg.steps, n, cell_seed)?;
            Ok(CellDesign {
                sets: prefixes(cfg, &seq)?,
                sequence: None,
                seed: cell_seed,
                k: 0,
                prior: None,
            })
        }
        _ => {
            let objective = objective.ok_or_else(|| Error::Argument(format!("{method} needs an objective")))?;
            let y_pilot = data.measurements(&fits.pilot);
            let (prior, noise, k): (Arc<dyn PriorCovariance>, f64, usize) = match method {
                Method::Isotropic => {
                    let f = fitted(&fits.isotropic, "isotropic")?;
                    (f.prior.clone(), f.noise.variance, cfg.k)
                }
                Method::Matern => {
                    let f = fitted(&fits.matern, "matern")?;
                    (f.prior.clone(), f.noise.variance, cfg.k)
                }
                Method::LindipBlock => {
                    let net = fitted(&fits.network, "network")?;
                    let f = fitted(&fits.block, "block prior")?;
                    let p = LinearisedPrior::new(net.jacobian.clone(), f.prior.clone())?;
                    (Arc::new(p), f.noise.variance, cfg.k_network)
                }
                _ => {
                    let net = fitted(&fits.network, "network")?;
                    let f = fitted(&fits.gprior, "g-prior")?;
                    let p = LinearisedPrior::new(net.jacobian.clone(), f.prior.clone())?;
                    (Arc::new(p), f.noise.variance, cfg.k_network)
                }
            };
            let mut hyper = prior.hyperparameters();
            hyper.push(("sigma_y2".into(), noise));
            let prior_info = (prior.family().to_string(), hyper);
            let mut state = init_state(
                prior,
                noise,
                op.clone(),
                fits.pilot.clone(),
                Some(y_pilot),
                JitterPolicy::default(),
            )?;
            let retrain = method == Method::LindipGpriorRetrain;
            let design = DesignConfig {
                objective,
                estimator: BlockEstimator::MonteCarlo,
                k,
                steps: cfg.steps,
                retrain_every: if retrain { cfg.retrain_every } else { 0 },
                seed: cell_seed,
            };
            let dp = data.detector_count;
            let measure = |a: usize| Ok(Some(data.sinogram.y[a * dp..(a + 1) * dp].to_vec()));
            let run = if retrain {
                let net = fitted(&fits.network, "network")?;
                let g = match &fitted(&fits.gprior, "g-prior")?.prior {
                    ThetaPrior::GPrior { g, .. } => *g,
                    ThetaPrior::BlockDiagonal { .. } => unreachable!("g-prior fit"),
                };
                let mut theta = net.trained.theta.clone();
                let mut round = 0u64;
                let mut hook = |s: &DesignState| -> Result<Arc<dyn PriorCovariance>> {
                    round += 1;
                    let sub = SubsetOperator::new(s.operator(), s.chosen());
                    let mut train = cfg.pilot_training.clone();
                    train.iterations = cfg.retrain_iterations;
                    train.seed = derive_seed(cell_seed, round);
                    let warm = cfg.warm_start.then_some(theta.as_slice());
                    let trained = train_dip(&net.network, &sub, s.measurements(), &train, warm)?;
                    theta = trained.theta;
                    let jac = NetworkJacobian::new(net.network.clone(), theta.clone())?;
                    let scale = compute_gprior_scale(&jac, &sub)?;
                    let prior = LinearisedPrior::new(Arc::new(jac), ThetaPrior::gprior(g, scale.s)?)?;
                    Ok(Arc::new(prior))
                };
                let hook: &mut PriorRefresh<'_> = &mut hook;
                run_design(&mut state, &design, &measure, Some(hook))?
            } else {
                run_design(&mut state, &design, &measure, None)?
            };
            Ok(CellDesign {
                sets: prefixes(cfg, &run.chosen)?,
                sequence: Some(run),
                seed: cell_seed,
                k,
                prior: Some(prior_info),
            })
        }
    }
}

/// PSNRs at one evaluation point. `None` marks a skipped or failed
/// reconstruction, explained by the matching status.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub angles: usize,
    pub tv_psnr: Option<f64>,
    pub tv_status: String,
    pub dip_psnr: Option<f64>,
    pub dip_status: String,
}

/// TV reconstruction PSNR of `subset` on one image.
pub fn tv_psnr(cfg: &ExperimentConfig, op: &TomoOperator, data: &ImageData, subset: &AngleSubset) -> Result<f64> {
    let entry = cfg.tv_schedule().lookup(subset.len())?.clone();
    let recon = ReconConfig {
        lambda: entry.lambda,
        iterations: entry.iterations,
        solver: cfg.tv_solver,
        ..Default::default()
    };
    let y = data.measurements(subset);
    let sub = SubsetOperator::new(op, subset);
    let report = tv_reconstruct(&sub, &y, cfg.height, cfg.width, &recon, None)?;
    psnr(&report.image, data.truth(), DATA_RANGE)
}

/// Maximum PSNR along a DIP fit of `subset` on one image.
pub fn dip_psnr(cfg: &ExperimentConfig, op: &TomoOperator, data: &ImageData, subset: &AngleSubset) -> Result<f64> {
    let entry = cfg.dip_schedule().lookup(subset.len())?.clone();
    let network = Network::new(&cfg.network)?;
    let dip = DipConfig {
        train: TrainConfig {
            lambda: entry.lambda,
            iterations: entry.iterations,
            learning_rate: cfg.dip_learning_rate,
            seed: derive_seed(cfg.image_seed(data.index), 3),
            ..Default::default()
        },
        psnr_every: 100,
    };
    let y = data.measurements(subset);
    let sub = SubsetOperator::new(op, subset);
    let report = dip_reconstruct(&network, &sub, &y, &dip, Some(data.truth()))?;
    report
        .max_psnr
        .ok_or_else(|| Error::Numerical("DIP reconstruction recorded no PSNR".into()))
}

/// Reconstructions are memoised per image and angle set, since the pilot and
/// the equidistant sets recur across cells.
#[derive(Default)]
pub struct ReconCache {
    tv: HashMap<Vec<usize>, Result<f64, String>>,
    dip: HashMap<Vec<usize>, Result<f64, String>>,
}

fn set_key(s: &AngleSubset) -> Vec<usize> {
    let mut k = s.indices().to_vec();
    k.sort_unstable();
    k
}

pub fn evaluate_sets(
    cfg: &ExperimentConfig,
    op: &TomoOperator,
    data: &ImageData,
    sets: &[AngleSubset],
    cache: &mut ReconCache,
) -> Vec<Evaluation> {
    sets.iter()
        .map(|s| {
            let key = set_key(s);
            let tv = cache
                .tv
                .entry(key.clone())
                .or_insert_with(|| tv_psnr(cfg, op, data, s).map_err(|e| e.to_string()))
                .clone();
            let dip = if cfg.evaluate_dip {
                Some(
                    cache
                        .dip
                        .entry(key)
                        .or_insert_with(|| dip_psnr(cfg, op, data, s).map_err(|e| e.to_string()))
                        .clone(),
                )
            } else {
                None
            };
            let (tv_psnr, tv_status) = split(Some(tv));
            let (dip_psnr, dip_status) = split(dip);
            Evaluation {
                angles: s.len(),
                tv_psnr,
                tv_status,
                dip_psnr,
                dip_status,
            }
        })
        .collect()
}

fn split(r: Option<Result<f64, String>>) -> (Option<f64>, String) {
    match r {
        Some(Ok(p)) => (Some(p), "ok".into()),
        Some(Err(e)) => (None, format!("failed: {e}")),
        None => (None, "skipped".into()),
    }
}

/// Everything recorded for one (image, method, objective) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub image: usize,
    pub method: Method,
    pub objective: Option<Objective>,
    pub design: Option<CellDesign>,
    pub evaluations: Vec<Evaluation>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn objective_name(&self) -> &'static str {
        self.objective.map_or("none", Objective::name)
    }

    pub fn steps(&self) -> &[DesignStep] {
        self.design
            .as_ref()
            .and_then(|d| d.sequence.as_ref())
            .map_or(&[], |r| r.steps.as_slice())
    }

    /// Final acquisition order for sequential designs, else the largest set.
    pub fn angles(&self) -> Vec<usize> {
        match &self.design {
            Some(CellDesign {
                sequence: Some(run), ..
            }) => run.chosen.indices().to_vec(),
            Some(d) => d.sets.last().map(|s| s.indices().to_vec()).unwrap_or_default(),
            None => Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
            || self
                .evaluations
                .iter()
                .any(|e| e.tv_status.starts_with("failed") || e.dip_status.starts_with("failed"))
    }

    pub fn psnr_rows(&self, cfg: &ExperimentConfig) -> Vec<PsnrRow> {
        let row = |recon: &str, angles, psnr, status: String| PsnrRow {
            image: self.image,
            method: self.method.name().into(),
            objective: self.objective_name().into(),
            recon: recon.into(),
            angles,
            psnr,
            status,
        };
        if let Some(e) = &self.error {
            return cfg
                .evaluation_points()
                .into_iter()
                .flat_map(|n| {
                    [
                        row("tv", n, None, format!("failed: {e}")),
                        row("dip", n, None, format!("failed: {e}")),
                    ]
                })
                .collect();
        }
        self.evaluations
            .iter()
            .flat_map(|e| {
                [
                    row("tv", e.angles, e.tv_psnr, e.tv_status.clone()),
                    row("dip", e.angles, e.dip_psnr, e.dip_status.clone()),
                ]
            })
            .collect()
    }
}

/// Mean and standard error over images for one curve point.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub objective: String,
    pub recon: String,
    pub angles: usize,
    pub n: usize,
    pub mean_psnr: f64,
    pub std_error: f64,
}

/// Groups rows by (method, objective, recon, angles) in first-seen order and
/// averages the rows that have a PSNR.
pub fn summarise(rows: &[PsnrRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String, usize)> = Vec::new();
    let mut groups: HashMap<(String, String, String, usize), Vec<f64>> = HashMap::new();
    for r in rows {
        let key = (r.method.clone(), r.objective.clone(), r.recon.clone(), r.angles);
        let g = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        if let Some(p) = r.psnr {
            g.push(p);
        }
    }
    order
        .into_iter()
        .filter_map(|key| {
            let v = &groups[&key];
            if v.is_empty() {
                return None;
            }
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std_error = if n > 1 {
                (v.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
            } else {
                0.0
            };
            Some(SummaryRow {
                method: key.0,
                objective: key.1,
                recon: key.2,
                angles: key.3,
                n,
                mean_psnr: mean,
                std_error,
            })
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = crate::design::csv_writer(path)?;
    w.write_record(["method", "objective", "recon", "angles", "n_images", "mean_psnr_db", "std_error_db"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.objective.clone(),
            r.recon.clone(),
            r.angles.to_string(),
            r.n.to_string(),
            format!("{:.6}", r.mean_psnr),
            format!("{:.6}", r.std_error),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-step scores of every remaining candidate (`step, angle_index,
/// angle_deg, score`); header only when there are no steps.
pub fn emit_diagnostics(path: &Path, steps: &[DesignStep], angles_deg: &[f64]) -> Result<()> {
    write_scores_csv(path, steps, angles_deg)
}

fn cell_stem(image: usize, method: Method, objective: &str) -> String {
    format!("image{image:03}_{}_{objective}", method.name())
}

/// Design files for one record: the acquisition order and the score history.
pub fn write_design_files(dir: &Path, record: &RunRecord, angles_deg: &[f64]) -> Result<()> {
    let stem = cell_stem(record.image, record.method, record.objective_name());
    if let Some(run) = record.design.as_ref().and_then(|d| d.sequence.as_ref()) {
        write_selected_csv(&dir.join(format!("{stem}_selected.csv")), run, angles_deg)?;
        let mut w = crate::design::csv_writer(&dir.join(format!("{stem}_timing.csv")))?;
        w.write_record(["step", "angle_index", "seconds"])?;
        for (t, s) in run.steps.iter().enumerate() {
            w.write_record([(t + 1).to_string(), s.angle.to_string(), format!("{:.4}", s.seconds)])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        // One entry per factorisation: initial, each update, each rebuild.
        let mut w = crate::design::csv_writer(&dir.join(format!("{stem}_jitter.csv")))?;
        w.write_record(["event", "jitter_fraction"])?;
        for (i, j) in run.jitter_trace.iter().enumerate() {
            w.write_record([i.to_string(), format!("{j:e}")])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        emit_diagnostics(&dir.join(format!("{stem}_scores.csv")), &run.steps, angles_deg)?;
    }
    if let Some(d) = &record.design {
        let mut manifest = io::header([
            ("image", toml::Value::Integer(record.image as i64)),
            ("method", toml::Value::String(record.method.name().into())),
            ("objective", toml::Value::String(record.objective_name().into())),
            ("seed", toml::Value::String(d.seed.to_string())),
            ("k", toml::Value::Integer(d.k as i64)),
        ]);
        if let Some((family, hyper)) = &d.prior {
            manifest.insert("prior_family".into(), toml::Value::String(family.clone()));
            let table: toml::Table = hyper.iter().map(|(k, v)| (k.clone(), toml::Value::Float(*v))).collect();
            manifest.insert("hyperparameters".into(), toml::Value::Table(table));
        }
        if let Some(run) = &d.sequence {
            let trace = run.jitter_trace.iter().map(|&j| toml::Value::Float(j)).collect();
            manifest.insert("jitter_trace".into(), toml::Value::Array(trace));
        }
        io::write_table(&dir.join(format!("{stem}_manifest.toml")), &manifest)?;
        let mut w = crate::design::csv_writer(&dir.join(format!("{stem}_sets.csv")))?;
        w.write_record(["angles", "indices"])?;
        for s in &d.sets {
            let idx: Vec<String> = s.indices().iter().map(|a| a.to_string()).collect();
            w.write_record([s.len().to_string(), idx.join(" ")])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Reads the angle sets written by [`write_design_files`].
pub fn read_design_sets(dir: &Path, image: usize, method: Method, objective: &str, n_candidates: usize) -> Result<Vec<AngleSubset>> {
    let path = dir.join(format!("{}_sets.csv", cell_stem(image, method, objective)));
    let mut r = csv::Reader::from_path(&path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let idx = rec
            .get(1)
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        out.push(AngleSubset::new(idx, n_candidates)?);
    }
    Ok(out)
}

/// Which stages [`run_images`] performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fit,
    Design,
    Evaluate,
}

/// Per-image output of [`run_images`].
pub struct ImageOutcome {
    pub image: usize,
    pub fits: Option<PilotFits>,
    pub records: Vec<RunRecord>,
    pub error: Option<String>,
}

/// Runs `stage` (and everything before it) on every image, images spread over
/// a worker pool. Results come back in image order regardless of scheduling.
pub fn run_images(cfg: &ExperimentConfig, stage: Stage) -> Result<Vec<ImageOutcome>> {
    let op = Arc::new(cfg.operator()?);
    let images: Vec<usize> = cfg.image_indices().collect();
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(images.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ImageOutcome>>> = Mutex::new((0..images.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= images.len() {
                    break;
                }
                let outcome = run_image(cfg, &op, images[i], stage);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|o| o.expect("every image processed"))
        .collect())
}

fn run_image(cfg: &ExperimentConfig, op: &Arc<TomoOperator>, image: usize, stage: Stage) -> ImageOutcome {
    let mut outcome = ImageOutcome {
        image,
        fits: None,
        records: Vec::new(),
        error: None,
    };
    let data = match generate_image(cfg, op, image) {
        Ok(d) => d,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return outcome;
        }
    };
    let fits = match fit_pilot(cfg, op, &data) {
        Ok(f) => f,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return outcome;
        }
    };
    if stage != Stage::Fit {
        let mut cache = ReconCache::default();
        for (method, objective) in cfg.cells() {
            let mut record = RunRecord {
                image,
                method,
                objective,
                design: None,
                evaluations: Vec::new(),
                error: None,
            };
            match design_cell(cfg, op, &data, &fits, method, objective) {
                Ok(d) => {
                    if stage == Stage::Evaluate {
                        record.evaluations = evaluate_sets(cfg, op, &data, &d.sets, &mut cache);
                    }
                    record.design = Some(d);
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            outcome.records.push(record);
        }
    }
    outcome.fits = Some(fits);
    outcome
}

/// Result of [`run_experiment`].
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub rows: Vec<PsnrRow>,
    pub summary: Vec<SummaryRow>,
    /// Failed cells and images.
    pub failures: usize,
}

/// The full protocol. Writes into `cfg.out_dir`:
///
/// * `config.toml`: the resolved config
/// * `fits/`: fitted hyperparameters and pilot networks
/// * `designs/`: acquisition orders, score histories, timings, angle sets
/// * `psnr.csv`: one row per image, cell, reconstruction and angle count
/// * `summary.csv`: mean and standard error over images
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let out = &cfg.out_dir;
    prepare_out_dir(cfg)?;
    let outcomes = run_images(cfg, Stage::Evaluate)?;
    let angles_deg = cfg.operator()?.geometry().angles_deg.clone();
    let mut failures = 0;
    let mut records = Vec::new();
    for o in outcomes {
        if let Some(e) = &o.error {
            failures += 1;
            // Keep the image in the tables as failure rows.
            for (method, objective) in cfg.cells() {
                records.push(RunRecord {
                    image: o.image,
                    method,
                    objective,
                    design: None,
                    evaluations: Vec::new(),
                    error: Some(e.clone()),
                });
            }
            continue;
        }
        if let Some(f) = &o.fits {
            write_fits(&out.join("fits"), o.image, f)?;
        }
        for r in o.records {
            write_design_files(&out.join("designs"), &r, &angles_deg)?;
            if r.failed() {
                failures += 1;
            }
            records.push(r);
        }
    }
    let rows: Vec<PsnrRow> = records.iter().flat_map(|r| r.psnr_rows(cfg)).collect();
    write_psnr_csv(&out.join("psnr.csv"), &rows)?;
    let summary = summarise(&rows);
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    Ok(ExperimentOutcome {
        records,
        rows,
        summary,
        failures,
    })
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out, e))
}

/// Writes every phantom and its full-candidate sinogram under `data/`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<usize> {
    prepare_out_dir(cfg)?;
    let op = cfg.operator()?;
    let dir = cfg.out_dir.join("data");
    let mut manifest = crate::design::csv_writer(&dir.join("manifest.csv"))?;
    manifest.write_record(["image", "seed", "preferential_deg"])?;
    for image in cfg.image_indices() {
        let d = generate_image(cfg, &op, image)?;
        manifest.write_record([
            image.to_string(),
            cfg.image_seed(image).to_string(),
            format!("{:.6}", d.phantom.preferential_deg),
        ])?;
        let stem = format!("image{image:03}");
        io::write_raw(
            &dir.join(format!("{stem}_phantom.f64")),
            d.truth().data(),
            &io::header([
                ("height", toml::Value::Integer(cfg.height as i64)),
                ("width", toml::Value::Integer(cfg.width as i64)),
                ("preferential_deg", toml::Value::Float(d.phantom.preferential_deg)),
            ]),
        )?;
        io::write_raw(
            &dir.join(format!("{stem}_sinogram.f64")),
            &d.sinogram.y,
            &io::header([
                ("n_candidates", toml::Value::Integer(cfg.n_candidates as i64)),
                ("detector_count", toml::Value::Integer(d.detector_count as i64)),
                ("noise_pct", toml::Value::Float(d.sinogram.noise_pct)),
                ("noise_std", toml::Value::Float(d.sinogram.noise_std)),
                ("noise_seed", toml::Value::String(d.sinogram.seed.to_string())),
            ]),
        )?;
    }
    manifest.flush().map_err(|e| Error::io(&dir, e))?;
    Ok(0)
}

/// Pilot fits for every image under `fits/`. Returns the number of failures.
pub fn fit_stage(cfg: &ExperimentConfig) -> Result<usize> {
    prepare_out_dir(cfg)?;
    let mut failures = 0;
    for o in run_images(cfg, Stage::Fit)? {
        match (&o.error, &o.fits) {
            (None, Some(f)) => {
                write_fits(&cfg.out_dir.join("fits"), o.image, f)?;
                let errs = [
                    f.isotropic.as_ref().is_some_and(|r| r.is_err()),
                    f.matern.as_ref().is_some_and(|r| r.is_err()),
                    f.network.as_ref().is_some_and(|r| r.is_err()),
                    f.block.as_ref().is_some_and(|r| r.is_err()),
                    f.gprior.as_ref().is_some_and(|r| r.is_err()),
                ];
                failures += errs.iter().filter(|&&e| e).count();
            }
            _ => failures += 1,
        }
    }
    Ok(failures)
}

/// Pilot fits and designs for every cell under `fits/` and `designs/`.
pub fn design_stage(cfg: &ExperimentConfig) -> Result<usize> {
    prepare_out_dir(cfg)?;
    let angles_deg = cfg.operator()?.geometry().angles_deg.clone();
    let mut failures = 0;
    for o in run_images(cfg, Stage::Design)? {
        if o.error.is_some() {
            failures += 1;
            continue;
        }
        if let Some(f) = &o.fits {
            write_fits(&cfg.out_dir.join("fits"), o.image, f)?;
        }
        for r in &o.records {
            if r.error.is_some() {
                failures += 1;
            }
            write_design_files(&cfg.out_dir.join("designs"), r, &angles_deg)?;
        }
    }
    Ok(failures)
}

/// Reconstructs the angle sets found under `designs/` and writes `psnr.csv`.
/// A missing design file becomes a failure row.
pub fn reconstruct_stage(cfg: &ExperimentConfig) -> Result<usize> {
    prepare_out_dir(cfg)?;
    let op = cfg.operator()?;
    let dir = cfg.out_dir.join("designs");
    let mut failures = 0;
    let mut rows = Vec::new();
    for image in cfg.image_indices() {
        let data = generate_image(cfg, &op, image)?;
        let mut cache = ReconCache::default();
        for (method, objective) in cfg.cells() {
            let mut record = RunRecord {
                image,
                method,
                objective,
                design: None,
                evaluations: Vec::new(),
                error: None,
            };
            match read_design_sets(&dir, image, method, record.objective_name(), cfg.n_candidates) {
                Ok(sets) => record.evaluations = evaluate_sets(cfg, &op, &data, &sets, &mut cache),
                Err(e) => record.error = Some(e.to_string()),
            }
            if record.failed() {
                failures += 1;
            }
            rows.extend(record.psnr_rows(cfg));
        }
    }
    write_psnr_csv(&cfg.out_dir.join("psnr.csv"), &rows)?;
    Ok(failures)
}

/// Summarises `psnr.csv` into `summary.csv`.
pub fn report_stage(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    let rows = crate::recon::read_psnr_csv(&cfg.out_dir.join("psnr.csv"))?;
    let summary = summarise(&rows);
    write_summary_csv(&cfg.out_dir.join("summary.csv"), &summary)?;
    Ok(summary)
}
