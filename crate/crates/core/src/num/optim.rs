use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Hyper-parameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: None,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    /// Updates skipped because a gradient was non-finite.
    pub skipped: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            skipped: 0,
            m: params.iter().map(|p| vec![S::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![S::ZERO; p.len()]).collect(),
        }
    }

    /// Rebuilds a saved state; every moment buffer must match its parameter length.
    pub fn from_moments(params: &[Tensor<S>], config: AdamConfig, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<Self> {
        let ok = m.len() == params.len()
            && v.len() == params.len()
            && params.iter().zip(&m).zip(&v).all(|((p, m), v)| m.len() == p.len() && v.len() == p.len());
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "adam_state",
                left: params.iter().map(|p| p.len()).collect(),
                right: m.iter().map(|m| m.len()).collect(),
            });
        }
        Ok(Self { config, step, skipped: 0, m, v })
    }

    /// First and second moment buffers.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }
}

/// One AdamW update of `params` in place.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len(), state.m.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        state.skipped += 1;
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let cfg = state.config;
    let clip = match cfg.max_grad_norm {
        Some(max) => {
            let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64() * v.to_f64()).sum::<f64>());
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let (ob1, ob2) = (S::from_f64(1.0 - cfg.beta1), S::from_f64(1.0 - cfg.beta2));
    let step_size = S::from_f64(lr / bc1);
    let inv_bc2 = S::from_f64(1.0 / bc2);
    let eps = S::from_f64(cfg.eps);
    let decay = S::from_f64(1.0 - lr * cfg.weight_decay);
    let clip = S::from_f64(clip);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gv = gv * clip;
            *mv = b1 * *mv + ob1 * gv;
            *vv = b2 * *vv + ob2 * gv * gv;
            *pv = *pv * decay - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
