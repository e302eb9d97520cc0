//! Training loops for the teacher, the one-step generator and the inverter,
//! plus the few-step inpainting pipelines built on them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, MaskedReduction};
use crate::mask::ensure_binary;
use crate::nets::ParamSet;
use crate::num::{adam_step, AdamConfig, AdamState, Scalar, StepOutcome, Tensor};

mod inpaint;
mod train;

pub use inpaint::{
    bld_from, bld_inpaint, ddim_inversion_inpaint, inpaint, inverfill_inpaint, BlendOptions, BlendTiming, InitMode,
    InpaintModels, InpaintRequest, InpaintResult,
};
pub use train::{
    build_target_pool, distill_generator, fresh_inverter_state, fresh_state, heldout_distill_mse, Frozen, train_inverter,
    train_teacher, DistillConfig, InverterTrainConfig, TargetPool, TeacherObjective, TeacherTrainConfig,
};

/// Settings shared by every training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub weights: LossWeights,
    pub reduction: MaskedReduction,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 means only at the end.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            steps: 1000,
            lr: 1e-5,
            disc_lr: 1e-6,
            weights: LossWeights::default(),
            reduction: MaskedReduction::AllElements,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.steps == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch ({}), steps ({}) and log_every ({}) must be positive",
                self.batch, self.steps, self.log_every
            )));
        }
        for (name, v) in [("lr", self.lr), ("disc_lr", self.disc_lr)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and positive, got {v}")));
            }
        }
        self.weights.validate()
    }
}

/// Parameters plus their optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

impl Trainable {
    pub fn new(params: ParamSet<f32>, adam: AdamConfig) -> Self {
        let adam = AdamState::new(params.tensors(), adam);
        Self { params, adam }
    }

    pub(crate) fn update(&mut self, grads: &[Tensor<f32>], lr: f64) -> Result<StepOutcome> {
        adam_step(self.params.tensors_mut(), grads, &mut self.adam, lr)
    }
}

/// Everything a loop needs to continue after a restart.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub model: Trainable,
    /// Discriminator heads; only the inverter loop uses them.
    pub disc: Option<Trainable>,
}

impl TrainState {
    /// Optimizer moments flattened for the checkpoint `extra` section.
    pub fn export_optimizer(&self) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        export_adam(&mut out, "model", &self.model)?;
        if let Some(d) = &self.disc {
            export_adam(&mut out, "disc", d)?;
        }
        Ok(out)
    }

    /// Inverse of [`TrainState::export_optimizer`] for parameters loaded from the same checkpoint.
    pub fn restore(
        step: usize,
        model: ParamSet<f32>,
        disc: Option<ParamSet<f32>>,
        extra: &ParamSet<f32>,
        adam: AdamConfig,
    ) -> Result<Self> {
        let model = import_adam(extra, "model", model, adam)?;
        let disc = disc.map(|d| import_adam(extra, "disc", d, adam)).transpose()?;
        Ok(Self { step, model, disc })
    }
}

/// Splits a counter into two values that are exact in `f32`.
pub fn split_counter(v: u64) -> Result<[f32; 2]> {
    if v >= 1 << 48 {
        return Err(Error::Checkpoint(format!("counter {v} exceeds 48 bits")));
    }
    Ok([(v >> 24) as f32, (v & 0xFF_FFFF) as f32])
}

pub fn join_counter(parts: &[f32]) -> Result<u64> {
    match parts {
        [hi, lo] if whole(*hi) && whole(*lo) && *lo < 16_777_216.0 => {
            Ok(((*hi as u64) << 24) | *lo as u64)
        }
        _ => Err(Error::Checkpoint(format!("malformed counter {parts:?}"))),
    }
}

fn whole(v: f32) -> bool {
    (0.0..1.0e15).contains(&v) && (v as u64) as f32 == v
}

fn export_adam(out: &mut ParamSet<f32>, prefix: &str, t: &Trainable) -> Result<()> {
    let c = split_counter(t.adam.step)?;
    out.push(format!("{prefix}.step"), Tensor::new(&[2], c.to_vec())?)?;
    let (m, v) = t.adam.moments();
    for ((name, p), (m, v)) in t.params.iter().zip(m.iter().zip(v)) {
        out.push(format!("{prefix}.m.{name}"), Tensor::new(p.shape(), m.clone())?)?;
        out.push(format!("{prefix}.v.{name}"), Tensor::new(p.shape(), v.clone())?)?;
    }
    Ok(())
}

fn import_adam(extra: &ParamSet<f32>, prefix: &str, params: ParamSet<f32>, cfg: AdamConfig) -> Result<Trainable> {
    let get = |key: String| {
        extra
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing {key}")))
    };
    let step = join_counter(get(format!("{prefix}.step"))?.data())?;
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for name in params.names() {
        m.push(get(format!("{prefix}.m.{name}"))?.into_data());
        v.push(get(format!("{prefix}.v.{name}"))?.into_data());
    }
    let adam = AdamState::from_moments(params.tensors(), cfg, step, m, v)?;
    Ok(Trainable { params, adam })
}

/// One logged training step; term names are fixed per loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub terms: Vec<(&'static str, f64)>,
}

impl LogRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// Receives log rows and checkpoint opportunities from a training loop.
pub trait TrainObserver {
    fn on_log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Keeps every log row in memory.
#[derive(Default, Debug)]
pub struct CollectLog(pub Vec<LogRow>);

impl TrainObserver for CollectLog {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        self.0.push(row.clone());
        Ok(())
    }
}

/// Monotonic nanosecond clock used for latency reports.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Reports zero for every reading, which keeps reports deterministic.
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

/// `z_hat (1 - m) + eps_prime m`; entries are copied, never recomputed.
pub fn reblend<S: Scalar>(z_hat: &Tensor<S>, eps_prime: &Tensor<S>, m: &Tensor<S>) -> Result<Tensor<S>> {
    if z_hat.shape() != eps_prime.shape() || z_hat.shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            op: "reblend",
            left: z_hat.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    ensure_binary(m)?;
    let data = z_hat
        .data()
        .iter()
        .zip(eps_prime.data())
        .zip(m.data())
        .map(|((&z, &e), &m)| if m == S::ONE { e } else { z })
        .collect();
    Tensor::new(z_hat.shape(), data)
}

pub(crate) fn finite_or(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("step {step}: {what} = {v}")))
    }
}
