use alloc::format;
use alloc::vec::Vec;

use super::{reblend, Clock};
use crate::error::{Error, Result};
use crate::mask::{ensure_binary, MaskPair};
use crate::nets::{run_student, ModelConfig, ParamSet, Teacher};
use crate::num::{gauss_draw, RngStream, Tensor};
use crate::schedule::{ddim_invert, ddim_step, forward_marginal, EpsModel, Level, NoiseSchedule, TimestepSubset};

/// How the starting latent of the few-step sampler is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitMode {
    Random,
    Inverfill,
    DdimInvert,
    DdimInvertReblend,
}

impl InitMode {
    pub const ALL: [InitMode; 4] = [Self::Random, Self::Inverfill, Self::DdimInvert, Self::DdimInvertReblend];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Inverfill => "inverfill",
            Self::DdimInvert => "ddiminv",
            Self::DdimInvertReblend => "ddiminv-reblend",
        }
    }
}

impl core::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown init mode {s:?} (random|inverfill|ddiminv|ddiminv-reblend)")))
    }
}

/// Where the known latent is pasted relative to the model call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendTiming {
    /// After each DDIM update, at the destination level.
    #[default]
    AfterUpdate,
    /// Before each model call, at the current level.
    BeforeModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlendOptions {
    pub timing: BlendTiming,
    /// Noise the known latent with fresh draws per step; `false` reuses the initial latent.
    pub fresh_noise: bool,
}

impl Default for BlendOptions {
    fn default() -> Self {
        Self { timing: BlendTiming::default(), fresh_noise: true }
    }
}

/// A batch of masked images to fill.
#[derive(Clone, Debug)]
pub struct InpaintRequest<'a> {
    /// `I_m = I_gt (1 - M)`, `[N, 1, R, R]`.
    pub masked: &'a Tensor<f32>,
    pub mask: &'a MaskPair,
    pub classes: &'a [usize],
    pub steps: usize,
    pub init: InitMode,
    /// Sample `i` draws its noise from `rng.derive_index(case_offset + i)`.
    pub rng: RngStream,
    pub case_offset: u64,
}

impl InpaintRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.masked.shape();
        if shape.len() != 4 || self.mask.full.shape() != shape || self.mask.latent.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "inpaint_request",
                left: shape.to_vec(),
                right: self.mask.full.shape().to_vec(),
            });
        }
        ensure_binary(&self.mask.full)?;
        ensure_binary(&self.mask.latent)?;
        if self.classes.len() != shape[0] {
            return Err(Error::InvalidConfig(format!("{} classes for a batch of {}", self.classes.len(), shape[0])));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("inpainting needs at least one step".into()));
        }
        let leak = self.masked.data().iter().zip(self.mask.full.data()).any(|(&x, &m)| m == 1.0 && x != 0.0);
        if leak {
            return Err(Error::InvalidConfig("masked image has non-zero pixels under the mask".into()));
        }
        Ok(())
    }

    /// One standard-normal draw per sample from that sample's `label` stream.
    pub fn noise(&self, label: &str) -> Result<Tensor<f32>> {
        let mut shape = self.masked.shape().to_vec();
        let n = core::mem::replace(&mut shape[0], 1);
        let parts: Vec<Tensor<f32>> = (0..n)
            .map(|i| gauss_draw(&mut self.rng.derive_index(self.case_offset + i as u64).derive(label), &shape))
            .collect();
        Tensor::stack(&parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    /// Composited output in pixel space.
    pub output: Tensor<f32>,
    /// `x0` prediction of each sampler step; empty unless tracing.
    pub x0_trace: Vec<Tensor<f32>>,
    /// Latent each step hands to the next model call; empty unless tracing.
    pub latent_trace: Vec<Tensor<f32>>,
    /// Starting latent of the few-step sampler.
    pub init_latent: Tensor<f32>,
    /// Inverted latent before Re-Blending, for the inversion-based inits.
    pub inverted: Option<Tensor<f32>>,
    pub init_ns: u64,
    pub sample_ns: u64,
    /// Denoiser evaluations, including those spent on inversion.
    pub nfe: usize,
}

fn paste(z: &Tensor<f32>, known: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
    // masked cells keep the sample, the rest take the known latent
    reblend(known, z, m)
}

/// Composited output, per-step x0 predictions and per-step latents.
pub type Blended = (Tensor<f32>, Vec<Tensor<f32>>, Vec<Tensor<f32>>);

/// Blended few-step DDIM from a given starting latent, then the pixel composite.
pub fn bld_from(
    z_init: &Tensor<f32>,
    req: &InpaintRequest<'_>,
    model: &dyn EpsModel<f32>,
    sched: &NoiseSchedule,
    opts: BlendOptions,
    trace: bool,
) -> Result<Blended> {
    req.validate()?;
    let subset = TimestepSubset::evenly(sched.steps(), req.steps)?;
    let m = &req.mask.latent;
    let z0m = req.masked;
    let blend_noise = |level: Level| -> Result<Tensor<f32>> {
        let noise = match level {
            Level::Noisy(t) if opts.fresh_noise => req.noise(&format!("blend{t}"))?,
            _ => z_init.clone(),
        };
        forward_marginal(z0m, level, &noise, sched)
    };
    let mut z = z_init.clone();
    let mut x0_trace = Vec::new();
    let mut latents = Vec::new();
    for (from, to) in subset.transitions() {
        if opts.timing == BlendTiming::BeforeModel {
            z = paste(&z, &blend_noise(Level::Noisy(from))?, m)?;
        }
        let eps = model.predict_eps(&z, from, req.classes)?;
        let step = ddim_step(&z, &eps, Level::Noisy(from), to, sched)?;
        z = step.z;
        if opts.timing == BlendTiming::AfterUpdate && to != Level::Clean {
            z = paste(&z, &blend_noise(to)?, m)?;
        }
        if trace {
            x0_trace.push(step.x0_pred);
            latents.push(z.clone());
        }
    }
    let output = paste(&z, req.masked, &req.mask.full)?;
    Ok((output, x0_trace, latents))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    z_init: Tensor<f32>,
    inverted: Option<Tensor<f32>>,
    init_ns: u64,
    extra_nfe: usize,
    req: &InpaintRequest<'_>,
    model: &dyn EpsModel<f32>,
    sched: &NoiseSchedule,
    opts: BlendOptions,
    clock: &dyn Clock,
    trace: bool,
) -> Result<InpaintResult> {
    let t0 = clock.now_ns();
    let (output, x0_trace, latent_trace) = bld_from(&z_init, req, model, sched, opts, trace)?;
    let sample_ns = clock.now_ns().saturating_sub(t0);
    Ok(InpaintResult {
        output,
        x0_trace,
        latent_trace,
        init_latent: z_init,
        inverted,
        init_ns,
        sample_ns,
        nfe: req.steps + extra_nfe,
    })
}

/// Blended sampling from fresh Gaussian noise.
pub fn bld_inpaint(
    req: &InpaintRequest<'_>,
    model: &dyn EpsModel<f32>,
    sched: &NoiseSchedule,
    opts: BlendOptions,
    clock: &dyn Clock,
    trace: bool,
) -> Result<InpaintResult> {
    let z = req.noise("z_init")?;
    finish(z, None, 0, 0, req, model, sched, opts, clock, trace)
}

/// Predicts the initial latent with the inverter, optionally re-blends it, then runs blended sampling.
#[allow(clippy::too_many_arguments)]
pub fn inverfill_inpaint(
    req: &InpaintRequest<'_>,
    cfg: &ModelConfig,
    inverter: &ParamSet<f32>,
    with_reblend: bool,
    model: &dyn EpsModel<f32>,
    sched: &NoiseSchedule,
    opts: BlendOptions,
    clock: &dyn Clock,
    trace: bool,
) -> Result<InpaintResult> {
    req.validate()?;
    let t0 = clock.now_ns();
    let z_hat = run_student(&cfg.student, inverter, req.masked, req.classes, sched.steps())?;
    let z = if with_reblend { reblend(&z_hat, &req.noise("eps_prime")?, &req.mask.latent)? } else { z_hat.clone() };
    let init_ns = clock.now_ns().saturating_sub(t0);
    finish(z, Some(z_hat), init_ns, 0, req, model, sched, opts, clock, trace)
}

/// DDIM inversion of the masked image over `inversion_steps`, optionally re-blended.
#[allow(clippy::too_many_arguments)]
pub fn ddim_inversion_inpaint(
    req: &InpaintRequest<'_>,
    model: &dyn EpsModel<f32>,
    sched: &NoiseSchedule,
    inversion_steps: usize,
    with_reblend: bool,
    opts: BlendOptions,
    clock: &dyn Clock,
    trace: bool,
) -> Result<InpaintResult> {
    req.validate()?;
    let t0 = clock.now_ns();
    let subset = TimestepSubset::evenly(sched.steps(), inversion_steps)?;
    let inv = ddim_invert(req.masked, req.classes, model, &subset, sched)?;
    let z = if with_reblend { reblend(&inv, &req.noise("eps_prime")?, &req.mask.latent)? } else { inv.clone() };
    let init_ns = clock.now_ns().saturating_sub(t0);
    finish(z, Some(inv), init_ns, inversion_steps, req, model, sched, opts, clock, trace)
}

/// Trained artifacts one inpainting run needs.
#[derive(Clone, Copy)]
pub struct InpaintModels<'a> {
    pub config: &'a ModelConfig,
    pub sched: &'a NoiseSchedule,
    pub teacher: &'a ParamSet<f32>,
    pub inverter: Option<&'a ParamSet<f32>>,
    /// Re-blend the inverter output before sampling.
    pub inverter_reblend: bool,
    pub inversion_steps: usize,
    pub blend: BlendOptions,
}

/// Dispatches on `req.init`.
pub fn inpaint(models: &InpaintModels<'_>, req: &InpaintRequest<'_>, clock: &dyn Clock, trace: bool) -> Result<InpaintResult> {
    let teacher = Teacher {
        cfg: &models.config.teacher,
        target: models.config.teacher_target,
        params: models.teacher,
        sched: models.sched,
    };
    let (sched, opts) = (models.sched, models.blend);
    match req.init {
        InitMode::Random => bld_inpaint(req, &teacher, sched, opts, clock, trace),
        InitMode::Inverfill => {
            let inv = models
                .inverter
                .ok_or_else(|| Error::InvalidConfig("inverfill init needs a trained inverter".into()))?;
            inverfill_inpaint(req, models.config, inv, models.inverter_reblend, &teacher, sched, opts, clock, trace)
        }
        InitMode::DdimInvert | InitMode::DdimInvertReblend => ddim_inversion_inpaint(
            req,
            &teacher,
            sched,
            models.inversion_steps,
            req.init == InitMode::DdimInvertReblend,
            opts,
            clock,
            trace,
        ),
    }
}
