use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::operator::LinearOperator;
use crate::tv::tv_smoothed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// TV strength `λ`.
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// `δ` in `|t| ≈ √(t² + δ²)`.
    pub tv_smoothing: f64,
    /// Seed for parameter initialisation (ignored on warm start).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            iterations: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            tv_smoothing: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNetwork {
    /// `θ*`
    pub theta: Vec<f64>,
    pub config: TrainConfig,
    /// Loss at the parameters entering each iteration, then at `θ*`.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

/// Loss `‖A x(θ) − y‖² + λ TV_δ(x(θ))` and its parameter gradient.
pub fn dip_loss(
    net: &Network,
    op: &dyn LinearOperator,
    y: &[f64],
    theta: &[f64],
    lambda: f64,
    delta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let cache = net.forward_cached(theta)?;
    let x = cache.output();
    let mut residual = op.forward(&x)?;
    for (r, yi) in residual.iter_mut().zip(y) {
        *r -= yi;
    }
    let mut grad_x = op.adjoint(&residual)?;
    grad_x.iter_mut().for_each(|g| *g *= 2.0);
    let (h, w) = (net.spec().height, net.spec().width);
    let tv = tv_smoothed(&x, h, w, delta, lambda, &mut grad_x)?;
    let loss = residual.iter().map(|r| r * r).sum::<f64>() + lambda * tv;
    let grad = net.vjp(theta, &cache, &grad_x)?;
    Ok((loss, grad, x))
}

/// Fits `θ` with Adam; `observe(iteration, image)` is called every
/// `observe_every` iterations (and at the end) when `observe_every > 0`.
pub fn train_dip_observed(
    net: &Network,
    op: &dyn LinearOperator,
    y: &[f64],
    config: &TrainConfig,
    warm_start: Option<&[f64]>,
    observe_every: usize,
    observe: &mut dyn FnMut(usize, &Image),
) -> Result<TrainedNetwork> {
    check_len("training data", op.measurement_len(), y.len())?;
    check_len("training operator", net.n_pixels(), op.image_len())?;
    if !(config.lambda >= 0.0) || !(config.learning_rate > 0.0) {
        return Err(Error::Argument("lambda must be >= 0 and learning rate > 0".into()));
    }
    let mut theta = match warm_start {
        Some(t) => {
            check_len("warm start parameters", net.n_params(), t.len())?;
            t.to_vec()
        }
        None => net.init_params(config.seed),
    };
    let (h, w) = (net.spec().height, net.spec().width);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for it in 0..=config.iterations {
        let (loss, grad, x) = dip_loss(net, op, y, &theta, config.lambda, config.tv_smoothing)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                loss,
                trace,
            });
        }
        if observe_every > 0 && (it % observe_every == 0 || it == config.iterations) {
            observe(it, &Image::new(h, w, x)?);
        }
        if it == config.iterations {
            break;
        }
        let t = (it + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for j in 0..theta.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * grad[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * grad[j] * grad[j];
            theta[j] -= config.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + config.epsilon);
        }
    }
    let final_loss = *trace.last().expect("at least one evaluation");
    Ok(TrainedNetwork {
        theta,
        config: config.clone(),
        loss_trace: trace,
        final_loss,
    })
}

/// Minimises `‖A x(θ) − y‖² + λ TV(x(θ))` over the network parameters.
pub fn train_dip(
    net: &Network,
    op: &dyn LinearOperator,
    y: &[f64],
    config: &TrainConfig,
    warm_start: Option<&[f64]>,
) -> Result<TrainedNetwork> {
    train_dip_observed(net, op, y, config, warm_start, 0, &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NetworkSpec;
    use crate::operator::Identity;

    fn small() -> Network {
        Network::new(&NetworkSpec {
            height: 8,
            width: 8,
            channels: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn stationary_at_exact_fit() {
        let net = small();
        let cfg = TrainConfig {
            lambda: 0.0,
            iterations: 5,
            seed: 2,
            ..Default::default()
        };
        let theta0 = net.init_params(2);
        let y = net.forward(&theta0).unwrap().into_data();
        let out = train_dip(&net, &Identity(64), &y, &cfg, None).unwrap();
        assert_eq!(out.loss_trace[0], 0.0);
        assert_eq!(out.theta, theta0);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let net = small();
        let y: Vec<f64> = (0..64).map(|i| if (i % 8) > 3 { 0.7 } else { 0.1 }).collect();
        let cfg = TrainConfig {
            lambda: 1e-3,
            iterations: 200,
            learning_rate: 1e-2,
            seed: 1,
            ..Default::default()
        };
        let a = train_dip(&net, &Identity(64), &y, &cfg, None).unwrap();
        let b = train_dip(&net, &Identity(64), &y, &cfg, None).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.loss_trace.len(), 201);
        assert!(a.final_loss < 0.1 * a.loss_trace[0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = small();
        let y: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let theta = net.init_params(9);
        let (_, g, _) = dip_loss(&net, &Identity(64), &y, &theta, 0.05, 1e-2).unwrap();
        for j in [0, 17, net.n_params() / 2, net.n_params() - 1] {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += 1e-6;
            tm[j] -= 1e-6;
            let fp = dip_loss(&net, &Identity(64), &y, &tp, 0.05, 1e-2).unwrap().0;
            let fm = dip_loss(&net, &Identity(64), &y, &tm, 0.05, 1e-2).unwrap().0;
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-5 * g[j].abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn nonfinite_loss_is_a_training_error() {
        let net = small();
        let y = vec![f64::NAN; 64];
        let err = train_dip(&net, &Identity(64), &y, &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Training { iteration: 0, .. }));
    }
}
