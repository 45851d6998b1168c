//! Synthetic rectangle phantoms with a preferential direction, and
//! calibrated Gaussian measurement noise.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stream;
use crate::tomo::{AngleSubset, TomoOperator};

/// Parameters of the rectangle dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_rects: usize,
    /// Spread of each rectangle's orientation around the image's preferential direction.
    pub orientation_std_deg: f64,
    /// Side lengths are drawn uniformly from this range, as fractions of `min(h, w)`.
    pub side_min_frac: f64,
    pub side_max_frac: f64,
    /// Rectangle centres are drawn uniformly from `[lo, hi]` of each image axis.
    pub centre_lo_frac: f64,
    pub centre_hi_frac: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Superimposed intensities are clipped to `[0, clip_max]`.
    pub clip_max: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_rects: 3,
            orientation_std_deg: 2.86,
            side_min_frac: 0.1,
            side_max_frac: 0.6,
            centre_lo_frac: 0.3,
            centre_hi_frac: 0.7,
            intensity_min: 0.2,
            intensity_max: 0.8,
            clip_max: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("phantom spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if !(self.orientation_std_deg >= 0.0) {
            return bad("orientation_std_deg must be >= 0");
        }
        if !(0.0 < self.side_min_frac && self.side_min_frac <= self.side_max_frac) {
            return bad("need 0 < side_min_frac <= side_max_frac");
        }
        if !(self.centre_lo_frac <= self.centre_hi_frac) {
            return bad("need centre_lo_frac <= centre_hi_frac");
        }
        let finite = [self.intensity_min, self.intensity_max, self.clip_max];
        if finite.iter().any(|v| !v.is_finite()) || self.intensity_min > self.intensity_max {
            return bad("intensity range must be finite and ordered");
        }
        if !(self.clip_max > 0.0) {
            return bad("clip_max must be positive");
        }
        Ok(())
    }
}

/// A sampled phantom plus the orientation draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub preferential_deg: f64,
    pub orientations_deg: Vec<f64>,
}

/// Draws one phantom. A pixel belongs to a rectangle when its centre lies
/// inside the rotated rectangle.
pub fn sample_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = stream(seed, 0x5048_414e);
    let (h, w) = (spec.height, spec.width);
    let preferential_deg = rng.random_range(0.0..180.0);
    let jitter = Normal::new(0.0, spec.orientation_std_deg).expect("std validated");
    let size = h.min(w) as f64;
    let mut data = vec![0.0; h * w];
    let mut orientations_deg = Vec::with_capacity(spec.n_rects);
    for _ in 0..spec.n_rects {
        let angle = preferential_deg + jitter.sample(&mut rng);
        let cx = rng.random_range(spec.centre_lo_frac..=spec.centre_hi_frac) * w as f64;
        let cy = rng.random_range(spec.centre_lo_frac..=spec.centre_hi_frac) * h as f64;
        let a = rng.random_range(spec.side_min_frac..=spec.side_max_frac) * size;
        let b = rng.random_range(spec.side_min_frac..=spec.side_max_frac) * size;
        let value = rng.random_range(spec.intensity_min..=spec.intensity_max);
        orientations_deg.push(angle);

        let (s, c) = angle.to_radians().sin_cos();
        for row in 0..h {
            // Image coordinates with y pointing up, as in the projector.
            let dy = (h as f64 - row as f64 - 0.5) - (h as f64 - cy);
            for col in 0..w {
                let dx = col as f64 + 0.5 - cx;
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                if along.abs() <= a / 2.0 && across.abs() <= b / 2.0 {
                    data[row * w + col] += value;
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, spec.clip_max);
    }
    Ok(Phantom {
        image: Image::new(h, w, data)?,
        preferential_deg,
        orientations_deg,
    })
}

/// Noisy measurements with their calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySinogram {
    pub y: Vec<f64>,
    pub clean: Option<Vec<f64>>,
    pub noise_std: f64,
    pub noise_pct: f64,
    pub seed: u64,
}

/// `y = A x + ε`, `ε ~ N(0, s² I)` with `s = noise_pct · mean|A x|`.
pub fn simulate_measurements(
    op: &TomoOperator,
    x: &[f64],
    subset: &AngleSubset,
    noise_pct: f64,
    seed: u64,
    keep_clean: bool,
) -> Result<NoisySinogram> {
    if subset.is_empty() {
        return Err(Error::Argument("cannot simulate an empty angle subset".into()));
    }
    if !(noise_pct >= 0.0) {
        return Err(Error::Argument(format!("noise_pct must be >= 0, got {noise_pct}")));
    }
    let clean = op.forward(subset, x)?;
    let mean_abs = clean.iter().map(|v| v.abs()).sum::<f64>() / clean.len() as f64;
    let noise_std = noise_pct * mean_abs;
    let mut rng = stream(seed, 0x4e4f_4953);
    let y = clean
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            c + noise_std * z
        })
        .collect();
    Ok(NoisySinogram {
        y,
        clean: keep_clean.then_some(clean),
        noise_std,
        noise_pct,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tomo::build_geometry;

    #[test]
    fn no_rectangles_gives_zero_image() {
        let spec = PhantomSpec {
            n_rects: 0,
            ..Default::default()
        };
        let p = sample_phantom(&spec, 3).unwrap();
        assert!(p.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::default();
        let a = sample_phantom(&spec, 11).unwrap();
        let b = sample_phantom(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_phantom(&spec, 12).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn values_clipped() {
        let spec = PhantomSpec {
            intensity_min: 0.7,
            intensity_max: 0.9,
            n_rects: 5,
            ..Default::default()
        };
        let p = sample_phantom(&spec, 1).unwrap();
        assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.image.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn invalid_spec() {
        let spec = PhantomSpec {
            orientation_std_deg: -1.0,
            ..Default::default()
        };
        assert!(sample_phantom(&spec, 0).is_err());
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let g = build_geometry(16, 16, 10, 23).unwrap();
        let op = TomoOperator::new(g);
        let spec = PhantomSpec {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let x = sample_phantom(&spec, 5).unwrap().image;
        let s = AngleSubset::new(vec![0, 3, 7], 10).unwrap();
        let m = simulate_measurements(&op, x.data(), &s, 0.0, 9, true).unwrap();
        assert_eq!(m.y, op.forward(&s, x.data()).unwrap());
        assert_eq!(m.noise_std, 0.0);
    }

    #[test]
    fn empty_subset_rejected() {
        let op = TomoOperator::new(build_geometry(4, 4, 3, 7).unwrap());
        let s = AngleSubset::default();
        assert!(simulate_measurements(&op, &[0.0; 16], &s, 0.05, 0, false).is_err());
    }
}
