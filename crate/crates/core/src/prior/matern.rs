//! Matérn-½ (exponential) covariance on the pixel grid, applied through a
//! circulant embedding of the stationary kernel and 2-D FFTs.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::PriorCovariance;
use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

/// Relative tolerance below which negative embedding eigenvalues count as round-off.
const NEGATIVE_TOL: f64 = 1e-10;

/// `σ_x² exp(-‖(i,j) - (i',j')‖ / ℓ)`.
pub fn matern_cov_entry(prior: &Matern12Prior, a: (usize, usize), b: (usize, usize)) -> f64 {
    let di = a.0 as f64 - b.0 as f64;
    let dj = a.1 as f64 - b.1 as f64;
    prior.variance * kernel(di.hypot(dj), prior.lengthscale)
}

fn kernel(distance: f64, lengthscale: f64) -> f64 {
    (-distance / lengthscale).exp()
}

/// A real symmetric block-circulant matrix on an `m1 × m2` torus, diagonalised
/// by the 2-D DFT.
#[derive(Clone)]
struct Torus {
    m1: usize,
    m2: usize,
    eigenvalues: Vec<f64>,
    row_fft: Arc<dyn Fft<f64>>,
    row_ifft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
    col_ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Torus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Torus").field("m1", &self.m1).field("m2", &self.m2).finish()
    }
}

impl Torus {
    fn new(m1: usize, m2: usize, lengthscale: f64) -> Self {
        let mut planner = FftPlanner::new();
        let mut torus = Self {
            m1,
            m2,
            eigenvalues: Vec::new(),
            row_fft: planner.plan_fft_forward(m2),
            row_ifft: planner.plan_fft_inverse(m2),
            col_fft: planner.plan_fft_forward(m1),
            col_ifft: planner.plan_fft_inverse(m1),
        };
        let mut c = vec![Complex64::new(0.0, 0.0); m1 * m2];
        for a in 0..m1 {
            let da = a.min(m1 - a) as f64;
            for b in 0..m2 {
                let db = b.min(m2 - b) as f64;
                c[a * m2 + b] = Complex64::new(kernel(da.hypot(db), lengthscale), 0.0);
            }
        }
        torus.fft2(&mut c, false);
        torus.eigenvalues = c.iter().map(|z| z.re).collect();
        torus
    }

    fn len(&self) -> usize {
        self.m1 * self.m2
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_ifft, &self.col_ifft)
        } else {
            (&self.row_fft, &self.col_fft)
        };
        row.process(buf);
        let mut t = transpose(buf, self.m1, self.m2);
        col.process(&mut t);
        let back = transpose(&t, self.m2, self.m1);
        buf.copy_from_slice(&back);
    }
}

fn transpose(buf: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); buf.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

/// Circulant embedding of the unit-variance kernel for an `h × w` grid.
///
/// Matrix-vector products use the minimal `2(h-1) × 2(w-1)` torus, which is
/// exact regardless of the sign of its spectrum. Sampling needs a
/// nonnegative spectrum: the torus is doubled up to `max_enlargements` times,
/// after which remaining negative eigenvalues are clipped to zero and the
/// clipped fraction of spectral mass is recorded.
#[derive(Debug, Clone)]
pub struct CirculantEmbedding {
    height: usize,
    width: usize,
    product: Torus,
    sampler: Torus,
    sampler_sqrt: Vec<f64>,
    enlargements: usize,
    clipped_mass: f64,
}

impl CirculantEmbedding {
    pub fn new(height: usize, width: usize, lengthscale: f64, max_enlargements: usize) -> Result<Self> {
        let base = |n: usize| if n > 1 { 2 * (n - 1) } else { 1 };
        let (b1, b2) = (base(height), base(width));
        let product = Torus::new(b1, b2, lengthscale);
        if product.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite circulant spectrum for lengthscale {lengthscale}"
            )));
        }

        let mut sampler = product.clone();
        let mut enlargements = 0;
        loop {
            let max = sampler.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let min = sampler.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min >= -NEGATIVE_TOL * max || enlargements == max_enlargements {
                break;
            }
            enlargements += 1;
            let scale = 1 << enlargements;
            sampler = Torus::new(b1 * scale, b2 * scale, lengthscale);
        }
        let total: f64 = sampler.eigenvalues.iter().map(|v| v.abs()).sum();
        let negative: f64 = sampler.eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
        let n = sampler.len() as f64;
        let sampler_sqrt = sampler.eigenvalues.iter().map(|v| (v.max(0.0) / n).sqrt()).collect();
        Ok(Self {
            height,
            width,
            product,
            sampler,
            sampler_sqrt,
            enlargements,
            clipped_mass: if total > 0.0 { negative / total } else { 0.0 },
        })
    }

    /// Number of torus doublings used for sampling.
    pub fn enlargements(&self) -> usize {
        self.enlargements
    }

    /// Fraction of spectral mass removed by clipping (0 when the embedding is exact).
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    pub fn sampling_grid(&self) -> (usize, usize) {
        (self.sampler.m1, self.sampler.m2)
    }

    /// Unit-variance kernel applied to one image.
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let t = &self.product;
        let mut buf = vec![Complex64::new(0.0, 0.0); t.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                buf[r * t.m2 + c].re = v[r * self.width + c];
            }
        }
        t.fft2(&mut buf, false);
        for (z, &l) in buf.iter_mut().zip(&t.eigenvalues) {
            *z *= l;
        }
        t.fft2(&mut buf, true);
        let n = t.len() as f64;
        for r in 0..self.height {
            for c in 0..self.width {
                out[r * self.width + c] = buf[r * t.m2 + c].re / n;
            }
        }
    }

    /// Two independent unit-variance draws from one complex FFT.
    fn draw_pair(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let t = &self.sampler;
        let mut buf: Vec<Complex64> = self
            .sampler_sqrt
            .iter()
            .map(|&s| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(s * re, s * im)
            })
            .collect();
        t.fft2(&mut buf, false);
        let mut a = Vec::with_capacity(self.height * self.width);
        let mut b = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let z = buf[r * t.m2 + c];
                a.push(z.re);
                b.push(z.im);
            }
        }
        (a, b)
    }
}

/// Stationary Matérn-½ prior over an `h × w` image.
#[derive(Debug, Clone)]
pub struct Matern12Prior {
    pub height: usize,
    pub width: usize,
    pub variance: f64,
    pub lengthscale: f64,
    embedding: Arc<CirculantEmbedding>,
}

impl Matern12Prior {
    pub fn new(height: usize, width: usize, variance: f64, lengthscale: f64) -> Result<Self> {
        let embedding = Arc::new(CirculantEmbedding::new(height, width, check_lengthscale(lengthscale)?, 2)?);
        Self::with_embedding(variance, lengthscale, embedding)
    }

    /// Reuses a precomputed unit-variance embedding (same grid and lengthscale).
    pub fn with_embedding(variance: f64, lengthscale: f64, embedding: Arc<CirculantEmbedding>) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Argument(format!(
                "Matern variance must be positive, got {variance}"
            )));
        }
        check_lengthscale(lengthscale)?;
        Ok(Self {
            height: embedding.height,
            width: embedding.width,
            variance,
            lengthscale,
            embedding,
        })
    }

    pub fn embedding(&self) -> &CirculantEmbedding {
        &self.embedding
    }

    /// Dense `d_x × d_x` kernel matrix (small grids only).
    pub fn dense(&self) -> Array2<f64> {
        let n = self.height * self.width;
        Array2::from_shape_fn((n, n), |(p, q)| {
            matern_cov_entry(self, (p / self.width, p % self.width), (q / self.width, q % self.width))
        })
    }
}

fn check_lengthscale(lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) || !lengthscale.is_finite() {
        return Err(Error::Argument(format!(
            "Matern lengthscale must be positive, got {lengthscale}"
        )));
    }
    Ok(lengthscale)
}

impl PriorCovariance for Matern12Prior {
    fn dim(&self) -> usize {
        self.height * self.width
    }

    fn matvec_rows(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("matern matvec", self.dim(), vs.ncols())?;
        let mut out = Array2::zeros(vs.raw_dim());
        for (v, mut o) in vs.outer_iter().zip(out.outer_iter_mut()) {
            let v = v.to_vec();
            let o = o.as_slice_mut().expect("owned rows are contiguous");
            self.embedding.apply(&v, o);
            for x in o.iter_mut() {
                *x *= self.variance;
            }
        }
        Ok(out)
    }

    fn sample(&self, rng: &mut Rng, k: usize) -> Result<Array2<f64>> {
        let sd = self.variance.sqrt();
        let mut out = Array2::zeros((k, self.dim()));
        let mut row = 0;
        while row < k {
            let (a, b) = self.embedding.draw_pair(rng);
            for draw in [a, b] {
                if row < k {
                    out.row_mut(row).assign(&ndarray::Array1::from(draw).mapv(|v| v * sd));
                    row += 1;
                }
            }
        }
        Ok(out)
    }

    fn hyperparameters(&self) -> Vec<(String, f64)> {
        vec![
            ("sigma_x2".into(), self.variance),
            ("lengthscale".into(), self.lengthscale),
        ]
    }

    fn family(&self) -> &'static str {
        "matern12"
    }
}
