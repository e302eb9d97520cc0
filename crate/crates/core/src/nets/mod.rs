//! Teacher denoiser, one-step generator, inverter and discriminator heads.

mod backbone;
mod checkpoint;
mod heads;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

pub use backbone::{backbone_forward, generator_forward, init_backbone, inverter_forward, Forward};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, ModelBundle};
pub use heads::{disc_heads_forward, init_heads};
pub use params::{Bound, ParamSet};

use crate::error::{Error, Result};
use crate::num::{fnv1a64, Scalar, Tape, Tensor, Var};
use crate::schedule::{EpsModel, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub(crate) fn apply<S: Scalar>(self, x: Var<'_, S>) -> Var<'_, S> {
        match self {
            Activation::Silu => x.silu(),
            Activation::Relu => x.relu(),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

/// What the teacher's raw output predicts; the public interface is always `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TeacherTarget {
    Eps,
    /// `v = sqrt(ab) eps - sqrt(1 - ab) x0`, converted with `eps = sqrt(1 - ab) z + sqrt(ab) v`.
    V,
}

impl TeacherTarget {
    pub fn name(self) -> &'static str {
        match self {
            TeacherTarget::Eps => "eps",
            TeacherTarget::V => "v",
        }
    }
}

impl FromStr for TeacherTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(TeacherTarget::Eps),
            "v" => Ok(TeacherTarget::V),
            _ => Err(Error::InvalidConfig(format!("unknown teacher target {s:?}"))),
        }
    }
}

/// Conv encoder-decoder with residual blocks; stage `i` runs at `resolution / 2^i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub blocks: usize,
    pub classes: usize,
    pub time_width: usize,
    pub embed_width: usize,
    pub activation: Activation,
}

impl BackboneConfig {
    pub fn teacher_default() -> Self {
        Self {
            in_channels: 1,
            channels: alloc::vec![12, 24, 48],
            blocks: 1,
            classes: 4,
            time_width: 16,
            embed_width: 32,
            activation: Activation::Silu,
        }
    }

    pub fn student_default() -> Self {
        Self {
            channels: alloc::vec![4, 8],
            ..Self::teacher_default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Teacher feature taps: every encoder stage, then every decoder stage.
    pub fn tap_channels(&self) -> Vec<usize> {
        let s = self.stages();
        let mut out = self.channels.clone();
        out.extend((0..s - 1).rev().map(|i| self.channels[i]));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.channels.is_empty()
            || self.channels.contains(&0)
            || self.classes == 0
            || self.embed_width == 0
            || self.time_width < 2
            || !self.time_width.is_multiple_of(2)
        {
            return Err(Error::InvalidConfig(format!("invalid backbone config {}", self.canonical())));
        }
        Ok(())
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let f = 1usize << (self.stages() - 1);
        if !resolution.is_multiple_of(f) || resolution < f {
            return Err(Error::InvalidConfig(format!("resolution {resolution} not divisible by {f}")));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| format!("{c}")).collect();
        format!(
            "in={};ch={};blocks={};classes={};time={};embed={};act={}",
            self.in_channels,
            ch.join(","),
            self.blocks,
            self.classes,
            self.time_width,
            self.embed_width,
            self.activation.name()
        )
    }

    pub fn param_count(&self) -> usize {
        let (e, cond) = (self.embed_width, self.time_width + self.classes);
        let conv = |ci: usize, co: usize| co * ci * 9 + co;
        let block = |c: usize| 2 * conv(c, c) + e * c + c;
        let s = self.stages();
        let mut n = e * cond + e + e * e + e;
        n += conv(self.in_channels, self.channels[0]) + conv(self.channels[0], self.in_channels);
        for i in 0..s {
            n += self.blocks * block(self.channels[i]);
            if i + 1 < s {
                n += conv(self.channels[i], self.channels[i + 1]) + conv(self.channels[i + 1], self.channels[i]);
                n += self.blocks * block(self.channels[i]);
            }
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HeadsConfig {
    pub hidden: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Everything that fixes parameter layouts and model semantics; hashed into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub teacher: BackboneConfig,
    pub teacher_target: TeacherTarget,
    /// Shared by the generator and the inverter.
    pub student: BackboneConfig,
    pub heads: HeadsConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            teacher: BackboneConfig::teacher_default(),
            teacher_target: TeacherTarget::V,
            student: BackboneConfig::student_default(),
            heads: HeadsConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher.check_resolution(self.resolution)?;
        self.student.check_resolution(self.resolution)?;
        if self.teacher.classes != self.student.classes || self.teacher.in_channels != self.student.in_channels {
            return Err(Error::InvalidConfig("teacher and student must agree on classes and channels".into()));
        }
        if self.heads.hidden == 0 {
            return Err(Error::InvalidConfig("heads.hidden must be positive".into()));
        }
        self.schedule.build().map(|_| ())
    }

    pub fn canonical(&self) -> String {
        format!(
            "res={}|teacher:{};target={}|student:{}|heads:hidden={}|schedule:T={};b0={:e};b1={:e}",
            self.resolution,
            self.teacher.canonical(),
            self.teacher_target.name(),
            self.student.canonical(),
            self.heads.hidden,
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end
        )
    }

    /// 64-bit FNV-1a of [`ModelConfig::canonical`].
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

/// Teacher evaluation: public `eps`, raw network output, optional taps.
pub struct TeacherOut<'t, S: Scalar> {
    pub eps: Var<'t, S>,
    pub raw: Var<'t, S>,
    pub taps: Vec<Var<'t, S>>,
}

/// Per-sample `[N, 1, 1, 1]` columns `(sqrt(ab_t), sqrt(1 - ab_t))`.
pub fn coefficient_columns<S: Scalar>(sched: &NoiseSchedule, ts: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut a = Vec::with_capacity(ts.len());
    let mut b = Vec::with_capacity(ts.len());
    for &t in ts {
        let (x, y) = sched.coefficients(crate::schedule::Level::Noisy(t))?;
        a.push(S::from_f64(x));
        b.push(S::from_f64(y));
    }
    let shape = [ts.len(), 1, 1, 1];
    Ok((Tensor::new(&shape, a)?, Tensor::new(&shape, b)?))
}

#[allow(clippy::too_many_arguments)]
pub fn denoiser_forward<'t, S: Scalar>(
    cfg: &BackboneConfig,
    target: TeacherTarget,
    p: &Bound<'t, '_, S>,
    sched: &NoiseSchedule,
    z: Var<'t, S>,
    ts: &[usize],
    classes: &[usize],
    want_taps: bool,
) -> Result<TeacherOut<'t, S>> {
    let f = backbone_forward(cfg, p, z, ts, classes, want_taps)?;
    let eps = match target {
        TeacherTarget::Eps => f.out,
        TeacherTarget::V => {
            let (sa, sb) = coefficient_columns::<S>(sched, ts)?;
            let tape = z.tape();
            z.mul(tape.constant(sb))?.add(f.out.mul(tape.constant(sa))?)?
        }
    };
    Ok(TeacherOut { eps, raw: f.out, taps: f.taps })
}

/// Frozen teacher as a sampler model.
pub struct Teacher<'a, S: Scalar> {
    pub cfg: &'a BackboneConfig,
    pub target: TeacherTarget,
    pub params: &'a ParamSet<S>,
    pub sched: &'a NoiseSchedule,
}

impl<S: Scalar> EpsModel<S> for Teacher<'_, S> {
    fn predict_eps(&self, z: &Tensor<S>, t: usize, classes: &[usize]) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let ts = alloc::vec![t; z.batch()];
        let out = denoiser_forward(self.cfg, self.target, &p, self.sched, tape.constant(z.clone()), &ts, classes, false)?;
        Ok((*out.eps.value()).clone())
    }
}

/// Runs a generator or inverter outside any training graph.
pub fn run_student<S: Scalar>(cfg: &BackboneConfig, params: &ParamSet<S>, x: &Tensor<S>, classes: &[usize], steps: usize) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = generator_forward(cfg, &p, tape.constant(x.clone()), classes, steps)?;
    Ok((*out.value()).clone())
}

/// Copies generator weights into a fresh inverter.
pub fn init_from_generator<S: Scalar>(gen_cfg: &BackboneConfig, inv_cfg: &BackboneConfig, gen: &ParamSet<S>) -> Result<ParamSet<S>> {
    if gen_cfg != inv_cfg {
        return Err(Error::ConfigMismatch(format!(
            "inverter config {} differs from generator config {}",
            inv_cfg.canonical(),
            gen_cfg.canonical()
        )));
    }
    Ok(gen.clone())
}
