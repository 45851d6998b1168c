//! A small U-net with a fixed input, smooth activations, and hand-written
//! forward- and reverse-mode derivatives with respect to its parameters.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::conv::{col2im, im2col, upsample, upsample_adjoint, ConvShape};
use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub height: usize,
    pub width: usize,
    /// Number of resolutions, including the input resolution.
    pub scales: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Skip connection from the encoder into the decoder at scale `s`, for
    /// `s < scales - 1`. Missing entries default to `true`.
    pub skips: Vec<bool>,
    pub input_channels: usize,
    /// Seed of the fixed uniform input tensor.
    pub input_seed: u64,
    /// Input values are drawn from `[0, input_scale)`.
    pub input_scale: f64,
    /// Asymptotic slope for negative pre-activations.
    pub negative_slope: f64,
    /// Sharpness of the softplus knee.
    pub sharpness: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            scales: 3,
            channels: 32,
            kernel: 3,
            skips: Vec::new(),
            input_channels: 1,
            input_seed: 0,
            input_scale: 0.1,
            negative_slope: 0.2,
            sharpness: 5.0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.height == 0 || self.width == 0 {
            return bad("network image must be non-empty".into());
        }
        if self.scales == 0 || self.channels == 0 || self.input_channels == 0 {
            return bad("scales and channel counts must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.skips.len() > self.scales.saturating_sub(1) {
            return bad(format!(
                "{} skip flags for {} scales",
                self.skips.len(),
                self.scales
            ));
        }
        if !(self.input_scale > 0.0) || !(self.sharpness > 0.0) {
            return bad("input scale and sharpness must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.negative_slope) {
            return bad("negative slope must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn skip(&self, scale: usize) -> bool {
        self.skips.get(scale).copied().unwrap_or(true)
    }
}

/// `φ(t) = a·t + (1 − a)·softplus_β(t)`, a smooth leaky ReLU.
#[derive(Debug, Clone, Copy)]
struct Activation {
    slope: f64,
    beta: f64,
}

impl Activation {
    fn value(&self, t: f64) -> f64 {
        let bt = self.beta * t;
        let softplus = (bt.max(0.0) + (-bt.abs()).exp().ln_1p()) / self.beta;
        self.slope * t + (1.0 - self.slope) * softplus
    }

    fn derivative(&self, t: f64) -> f64 {
        let sigmoid = 1.0 / (1.0 + (-self.beta * t).exp());
        self.slope + (1.0 - self.slope) * sigmoid
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerInput {
    /// The fixed network input.
    Fixed,
    /// Output of an earlier layer at the same resolution.
    Layer(usize),
    /// Upsampled output of `low`, concatenated with the output of `skip`.
    Up { low: usize, skip: Option<usize> },
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    shape: ConvShape,
    out_channels: usize,
    activated: bool,
    input: LayerInput,
    weights: Range<usize>,
    bias: Range<usize>,
}

impl Layer {
    fn out_hw(&self) -> (usize, usize) {
        (self.shape.out_h(), self.shape.out_w())
    }
}

/// Primal quantities at a parameter vector, reused by `jvp` and `vjp`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<Array2<f64>>,
    patches: Vec<Array2<f64>>,
    slopes: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// The network output as a flat image.
    pub fn output(&self) -> Vec<f64> {
        self.outputs.last().expect("at least one layer").column(0).to_vec()
    }
}

/// Encoder–decoder network `θ ↦ x(θ)` with one convolution per scale on each
/// path, stride-2 downsampling, nearest upsampling and concatenated skips,
/// followed by a 1×1 output convolution with identity activation.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    input: Array2<f64>,
    n_params: usize,
    activation: Activation,
}

impl Network {
    /// Builds the network and draws its fixed input from `spec.input_seed`.
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.input_seed, 0x6e_6574_696e);
        let n = spec.height * spec.width * spec.input_channels;
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..spec.input_scale)).collect();
        Self::with_input(spec, values)
    }

    /// Builds the network around a stored input tensor (`h·w × c_in`, row-major).
    pub fn with_input(spec: &NetworkSpec, input: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let (h, w, c) = (spec.height, spec.width, spec.channels);
        check_len("network input", h * w * spec.input_channels, input.len())?;
        let input = Array2::from_shape_vec((h * w, spec.input_channels), input)
            .map_err(|e| Error::Argument(e.to_string()))?;

        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: ConvShape, out_channels, activated, input| {
            let n_w = shape.patch_len() * out_channels;
            let weights = offset..offset + n_w;
            let bias = offset + n_w..offset + n_w + out_channels;
            offset = bias.end;
            layers.push(Layer {
                name,
                shape,
                out_channels,
                activated,
                input,
                weights,
                bias,
            });
            layers.len() - 1
        };
        let conv = |in_hw: (usize, usize), in_c, kernel, stride| ConvShape {
            in_h: in_hw.0,
            in_w: in_hw.1,
            in_c,
            kernel,
            stride,
        };

        let k = spec.kernel;
        let mut res = vec![(h, w)];
        let mut enc = vec![push(
            "in".into(),
            conv((h, w), spec.input_channels, k, 1),
            c,
            true,
            LayerInput::Fixed,
        )];
        for s in 1..spec.scales {
            let shape = conv(res[s - 1], c, k, 2);
            res.push((shape.out_h(), shape.out_w()));
            enc.push(push(format!("down{s}"), shape, c, true, LayerInput::Layer(enc[s - 1])));
        }
        let mut cur = enc[spec.scales - 1];
        for s in (0..spec.scales - 1).rev() {
            let skip = spec.skip(s).then_some(enc[s]);
            let in_c = c + if skip.is_some() { c } else { 0 };
            cur = push(
                format!("up{s}"),
                conv(res[s], in_c, k, 1),
                c,
                true,
                LayerInput::Up { low: cur, skip },
            );
        }
        push("out".into(), conv((h, w), c, 1, 1), 1, false, LayerInput::Layer(cur));

        Ok(Self {
            spec: spec.clone(),
            layers,
            input,
            n_params: offset,
            activation: Activation {
                slope: spec.negative_slope,
                beta: spec.sharpness,
            },
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// `d_θ`
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_pixels(&self) -> usize {
        self.spec.height * self.spec.width
    }

    /// The fixed input, `h·w × c_in` row-major.
    pub fn input(&self) -> &[f64] {
        self.input.as_slice().expect("standard layout")
    }

    /// Parameter ranges, one per convolution (weights and bias together).
    pub fn blocks(&self) -> Vec<(String, Range<usize>)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.weights.start..l.bias.end))
            .collect()
    }

    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, 0x696e_6974);
        let mut theta = vec![0.0; self.n_params];
        for l in &self.layers {
            let bound = 1.0 / (l.shape.patch_len() as f64).sqrt();
            for v in &mut theta[l.weights.start..l.bias.end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        theta
    }

    fn weights<'a>(&self, layer: &Layer, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (layer.shape.patch_len(), layer.out_channels),
            &theta[layer.weights.clone()],
        )
        .expect("weight block shape")
    }

    fn bias<'a>(&self, layer: &Layer, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[layer.bias.clone()])
    }

    /// Assembles the input map of `layer` from per-layer maps; `None` when
    /// the layer reads the fixed input and `maps` are tangents.
    fn gather(&self, layer: &Layer, maps: &[Array2<f64>]) -> Option<Array2<f64>> {
        match &layer.input {
            LayerInput::Fixed => None,
            LayerInput::Layer(j) => Some(maps[*j].clone()),
            LayerInput::Up { low, skip } => {
                let low_hw = self.layers[*low].out_hw();
                let high_hw = (layer.shape.in_h, layer.shape.in_w);
                let up = upsample(maps[*low].view(), low_hw, high_hw);
                Some(match skip {
                    None => up,
                    Some(j) => ndarray::concatenate(Axis(1), &[up.view(), maps[*j].view()])
                        .expect("matching rows"),
                })
            }
        }
    }

    /// Adjoint of [`Self::gather`]: accumulates `grad` into the source maps.
    fn scatter(&self, layer: &Layer, grad: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut add = |j: usize, g: Array2<f64>| match &mut grads[j] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        };
        match &layer.input {
            LayerInput::Fixed => {}
            LayerInput::Layer(j) => add(*j, grad),
            LayerInput::Up { low, skip } => {
                let c_low = self.layers[*low].out_channels;
                let low_hw = self.layers[*low].out_hw();
                let high_hw = (layer.shape.in_h, layer.shape.in_w);
                let g_low = upsample_adjoint(grad.slice(s![.., ..c_low]), low_hw, high_hw);
                add(*low, g_low);
                if let Some(j) = skip {
                    add(*j, grad.slice(s![.., c_low..]).to_owned());
                }
            }
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("network parameters", self.n_params, theta.len())
    }

    /// `x(θ)`
    pub fn forward(&self, theta: &[f64]) -> Result<Image> {
        let cache = self.forward_cached(theta)?;
        Image::new(self.spec.height, self.spec.width, cache.output())
    }

    /// Forward pass keeping patches and activation slopes for differentiation.
    pub fn forward_cached(&self, theta: &[f64]) -> Result<ForwardCache> {
        self.check_theta(theta)?;
        let n = self.layers.len();
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut patches = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        for layer in &self.layers {
            let input = self.gather(layer, &outputs).unwrap_or_else(|| self.input.clone());
            let cols = im2col(input.view(), &layer.shape);
            let mut z = cols.dot(&self.weights(layer, theta));
            z += &self.bias(layer, theta);
            if layer.activated {
                slopes.push(z.mapv(|t| self.activation.derivative(t)));
                z.mapv_inplace(|t| self.activation.value(t));
            } else {
                slopes.push(Array2::zeros((0, 0)));
            }
            patches.push(cols);
            outputs.push(z);
        }
        Ok(ForwardCache {
            outputs,
            patches,
            slopes,
        })
    }

    /// Forward-mode derivative `J v` at the parameters that produced `cache`.
    pub fn jvp(&self, theta: &[f64], cache: &ForwardCache, v: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        check_len("jvp direction", self.n_params, v.len())?;
        let mut tangents: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut dz = cache.patches[i].dot(&self.weights(layer, v));
            dz += &self.bias(layer, v);
            if let Some(din) = self.gather(layer, &tangents) {
                let cols = im2col(din.view(), &layer.shape);
                ndarray::linalg::general_mat_mul(1.0, &cols, &self.weights(layer, theta), 1.0, &mut dz);
            }
            if layer.activated {
                dz *= &cache.slopes[i];
            }
            tangents.push(dz);
        }
        Ok(tangents.last().expect("layers").column(0).to_vec())
    }

    /// Reverse-mode derivative `Jᵀ u` at the parameters that produced `cache`.
    pub fn vjp(&self, theta: &[f64], cache: &ForwardCache, u: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        check_len("vjp cotangent", self.n_pixels(), u.len())?;
        let n = self.layers.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[n - 1] = Some(Array2::from_shape_vec((u.len(), 1), u.to_vec()).expect("column"));
        let mut out = vec![0.0; self.n_params];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let Some(mut gz) = grads[i].take() else {
                continue;
            };
            if layer.activated {
                gz *= &cache.slopes[i];
            }
            let gw = cache.patches[i].t().dot(&gz);
            out[layer.weights.clone()].copy_from_slice(gw.as_slice().expect("owned"));
            let gb: Array1<f64> = gz.sum_axis(Axis(0));
            out[layer.bias.clone()].copy_from_slice(gb.as_slice().expect("owned"));
            if layer.input != LayerInput::Fixed {
                let gcols = gz.dot(&self.weights(layer, theta).t());
                let gin = col2im(gcols.view(), &layer.shape);
                self.scatter(layer, gin, &mut grads);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    pub(crate) fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            height: 7,
            width: 6,
            scales: 3,
            channels: 3,
            input_channels: 2,
            input_seed: 4,
            ..Default::default()
        }
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 1);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn output_shape_and_param_count() {
        let net = Network::new(&toy_spec()).unwrap();
        let theta = net.init_params(1);
        let x = net.forward(&theta).unwrap();
        assert_eq!((x.height(), x.width()), (7, 6));
        // in: 9·2·3+3, down1/down2: 9·3·3+3 each, up1/up0: 9·6·3+3 each, out: 3+1.
        assert_eq!(net.n_params(), 57 + 2 * 84 + 2 * 165 + 4);
        assert_eq!(net.blocks().len(), 6);
    }

    #[test]
    fn deterministic_forward() {
        let net = Network::new(&toy_spec()).unwrap();
        let theta = net.init_params(3);
        let a = net.forward(&theta).unwrap();
        let b = Network::new(&toy_spec()).unwrap().forward(&theta).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_output_layer_gives_zero_image() {
        let net = Network::new(&toy_spec()).unwrap();
        let mut theta = net.init_params(3);
        let (_, out) = net.blocks().pop().unwrap();
        theta[out].iter_mut().for_each(|v| *v = 0.0);
        assert!(net.forward(&theta).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jvp_vjp_adjoint() {
        let net = Network::new(&toy_spec()).unwrap();
        let theta = net.init_params(5);
        let cache = net.forward_cached(&theta).unwrap();
        for t in 0..5 {
            let v = random_vec(net.n_params(), 10 + t);
            let u = random_vec(net.n_pixels(), 20 + t);
            let lhs = dot(&net.jvp(&theta, &cache, &v).unwrap(), &u);
            let rhs = dot(&v, &net.vjp(&theta, &cache, &u).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} {rhs}");
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let spec = NetworkSpec {
            skips: vec![true, false],
            ..toy_spec()
        };
        let net = Network::new(&spec).unwrap();
        let theta = net.init_params(6);
        let cache = net.forward_cached(&theta).unwrap();
        let v = random_vec(net.n_params(), 30);
        let jv = net.jvp(&theta, &cache, &v).unwrap();
        let h = 1e-5;
        let shift = |sign: f64| -> Vec<f64> {
            let t: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + sign * h * b).collect();
            net.forward(&t).unwrap().into_data()
        };
        let (p, m) = (shift(1.0), shift(-1.0));
        let fd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err: f64 = fd.iter().zip(&jv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err < 1e-6 * scale, "rel err {}", err / scale);
    }

    #[test]
    fn rejects_wrong_lengths() {
        let net = Network::new(&toy_spec()).unwrap();
        assert!(net.forward(&[0.0; 3]).is_err());
        let theta = net.init_params(0);
        let cache = net.forward_cached(&theta).unwrap();
        assert!(net.jvp(&theta, &cache, &[1.0]).is_err());
        assert!(net.vjp(&theta, &cache, &[1.0]).is_err());
    }

    #[test]
    fn activation_derivative() {
        let a = Activation {
            slope: 0.2,
            beta: 5.0,
        };
        for t in [-3.0, -0.1, 0.0, 0.4, 2.0] {
            let fd = (a.value(t + 1e-6) - a.value(t - 1e-6)) / 2e-6;
            assert!((fd - a.derivative(t)).abs() < 1e-8);
        }
        assert!(a.value(-50.0).is_finite() && a.value(50.0).is_finite());
    }
}
