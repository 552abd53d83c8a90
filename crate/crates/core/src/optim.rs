//! SGD with classical momentum and the cosine annealing schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    config: SgdConfig,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(params: &[Tensor<S>], config: SgdConfig) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::invalid(format!(
                "sgd: {} params, {} grads, {} buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        let mu = S::lit(self.config.momentum);
        let wd = S::lit(self.config.weight_decay);
        let lr = S::lit(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::mismatch("sgd", p.shape(), g.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One stateless SGD step; `velocity` is updated in place.
pub fn sgd_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    velocity: &mut [Tensor<S>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut opt = Sgd {
        config: SgdConfig {
            momentum,
            weight_decay,
        },
        velocity: velocity.to_vec(),
    };
    opt.step(params, grads, lr)?;
    velocity.clone_from_slice(&opt.velocity);
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "cosine_lr: step {step} beyond total {total_steps}"
        )));
    }
    if lr0 <= 0.0 {
        return Err(Error::invalid("cosine_lr: lr0 must be positive"));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
