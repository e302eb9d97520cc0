//! TOML run configuration.
//!
//! Every table rejects unknown keys. Enum-valued fields are kept as strings
//! here and parsed by the core `FromStr` impls, so error messages carry the
//! dotted key name.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use noiseinv_core::eval::ProbeConfig;
use noiseinv_core::losses::{LossWeights, MaskedReduction};
use noiseinv_core::mask::{MaskConfig, MaskFamily};
use noiseinv_core::nets::{Activation, BackboneConfig, HeadsConfig, ModelConfig, ScheduleConfig, TeacherTarget};
use noiseinv_core::num::{fnv1a64, AdamConfig};
use noiseinv_core::pipelines::{
    BlendOptions, BlendTiming, DistillConfig, InitMode, InverterTrainConfig, TeacherObjective, TeacherTrainConfig,
    TrainConfig,
};
use noiseinv_core::synth::SynthSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub resolution: usize,
    pub classes: usize,
    pub position_jitter: f64,
    pub size_min: f64,
    pub size_max: f64,
    pub foreground: [f64; 2],
    pub background: [f64; 2],
    pub stripe_period: [f64; 2],
    pub mask_family: String,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub thick_radius: [f64; 2],
    pub thin_radius: [f64; 2],
    pub vertices: [usize; 2],
    pub max_tries: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        let m = MaskConfig::default();
        Self {
            resolution: s.resolution,
            classes: s.classes,
            position_jitter: s.position_jitter,
            size_min: s.size_min,
            size_max: s.size_max,
            foreground: s.foreground.into(),
            background: s.background.into(),
            stripe_period: s.stripe_period.into(),
            mask_family: MaskFamily::Mixed.name().into(),
            coverage_min: m.coverage_min,
            coverage_max: m.coverage_max,
            thick_radius: m.thick_radius.into(),
            thin_radius: m.thin_radius.into(),
            vertices: m.vertices.into(),
            max_tries: m.max_tries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self { steps: s.steps, beta_start: s.beta_start, beta_end: s.beta_end }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub teacher_channels: Vec<usize>,
    /// Shared by the generator and the inverter.
    pub student_channels: Vec<usize>,
    pub blocks: usize,
    pub time_width: usize,
    pub embed_width: usize,
    pub activation: String,
    pub teacher_target: String,
    pub heads_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            teacher_channels: m.teacher.channels.clone(),
            student_channels: m.student.channels.clone(),
            blocks: m.teacher.blocks,
            time_width: m.teacher.time_width,
            embed_width: m.teacher.embed_width,
            activation: m.teacher.activation.name().into(),
            teacher_target: m.teacher_target.name().into(),
            heads_hidden: m.heads.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub batch: usize,
    /// 0 writes a checkpoint only at the end of a run.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub inverter: InverterSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            seed: 0,
            batch: 32,
            checkpoint_every: 500,
            log_every: 10,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            weight_decay: a.weight_decay,
            max_grad_norm: a.max_grad_norm.unwrap_or(0.0),
            teacher: TeacherSection::default(),
            distill: DistillSection::default(),
            inverter: InverterSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub steps: usize,
    pub lr: f64,
    pub objective: String,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { steps: 2000, lr: 2e-3, objective: TeacherObjective::Native.name().into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub steps: usize,
    pub lr: f64,
    pub pool: usize,
    pub heldout: usize,
    pub teacher_steps: usize,
    /// Batch size used while sampling teacher targets.
    pub chunk: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self { steps: 2000, lr: 1e-3, pool: d.pool, heldout: d.heldout, teacher_steps: d.teacher_steps, chunk: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverterSection {
    pub steps: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub reblend: bool,
    pub lambda_noise: f64,
    pub lambda_image: f64,
    pub lambda_recons: f64,
    pub lambda_reg: f64,
    pub lambda_adv: f64,
    /// "all" or "unmasked".
    pub reduction: String,
}

impl Default for InverterSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            steps: 2000,
            lr: 1e-3,
            disc_lr: 1e-4,
            reblend: true,
            lambda_noise: w.noise,
            lambda_image: w.image,
            lambda_recons: w.recons,
            lambda_reg: w.reg,
            lambda_adv: w.adv,
            reduction: "all".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub cases: usize,
    /// Sampler step counts evaluated by `eval`.
    pub steps: Vec<usize>,
    pub inits: Vec<String>,
    pub chunk: usize,
    pub bins: usize,
    pub inversion_steps: usize,
    pub fresh_blend_noise: bool,
    /// "after-update" or "before-model".
    pub blend_timing: String,
    /// Steps used by the ablation ladder's evaluation.
    pub ablation_steps: usize,
    /// Record wall-clock latencies; false writes zeros so CSVs are reproducible.
    pub timing: bool,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_channels: [usize; 2],
    pub probe_batch: usize,
    pub probe_heldout: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            seed: 0,
            cases: 200,
            steps: vec![2, 4],
            inits: InitMode::ALL.iter().map(|m| m.name().into()).collect(),
            chunk: 32,
            bins: 64,
            inversion_steps: 50,
            fresh_blend_noise: true,
            blend_timing: "after-update".into(),
            ablation_steps: 4,
            timing: true,
            probe_steps: p.steps,
            probe_lr: p.lr,
            probe_channels: p.channels.into(),
            probe_batch: p.batch,
            probe_heldout: p.heldout,
        }
    }
}

fn parse<T: FromStr<Err = noiseinv_core::Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e| anyhow!("{key}: {e}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow!("invalid config {}: {}", span_hint(text, &e), e.message().trim()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// FNV-1a of the canonical serialisation; equal configs hash equally regardless of layout in the file.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.synth().validate()?;
        let fam = self.mask_family()?;
        self.mask_config().validate(fam, self.data.resolution)?;
        self.teacher_config()?.train.validate()?;
        self.distill_config()?.train.validate()?;
        self.inverter_config()?.train.validate()?;
        self.inits()?;
        self.blend()?;
        let e = &self.eval;
        if e.cases == 0 || e.chunk == 0 || e.steps.is_empty() || e.steps.contains(&0) || e.ablation_steps == 0 {
            bail!("eval: cases, chunk, ablation_steps and every entry of steps must be positive");
        }
        if e.bins == 0 || e.cases * self.data.resolution * self.data.resolution < 10 * e.bins {
            bail!("eval.bins: {} bins need at least 10 latent values per bin", e.bins);
        }
        if self.distill_config()?.pool == 0 || self.train.distill.chunk == 0 {
            bail!("train.distill: pool and chunk must be positive");
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            resolution: d.resolution,
            classes: d.classes,
            position_jitter: d.position_jitter,
            size_min: d.size_min,
            size_max: d.size_max,
            foreground: d.foreground.into(),
            background: d.background.into(),
            stripe_period: d.stripe_period.into(),
        }
    }

    pub fn mask_family(&self) -> Result<MaskFamily> {
        parse("data.mask_family", &self.data.mask_family)
    }

    pub fn mask_config(&self) -> MaskConfig {
        let d = &self.data;
        MaskConfig {
            coverage_min: d.coverage_min,
            coverage_max: d.coverage_max,
            thick_radius: d.thick_radius.into(),
            thin_radius: d.thin_radius.into(),
            vertices: d.vertices.into(),
            max_tries: d.max_tries,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let activation: Activation = parse("model.activation", &m.activation)?;
        let bb = |channels: &[usize]| BackboneConfig {
            in_channels: 1,
            channels: channels.to_vec(),
            blocks: m.blocks,
            classes: self.data.classes,
            time_width: m.time_width,
            embed_width: m.embed_width,
            activation,
        };
        Ok(ModelConfig {
            resolution: self.data.resolution,
            teacher: bb(&m.teacher_channels),
            teacher_target: parse::<TeacherTarget>("model.teacher_target", &m.teacher_target)?,
            student: bb(&m.student_channels),
            heads: HeadsConfig { hidden: m.heads_hidden },
            schedule: ScheduleConfig {
                steps: self.schedule.steps,
                beta_start: self.schedule.beta_start,
                beta_end: self.schedule.beta_end,
            },
        })
    }

    pub fn adam(&self) -> AdamConfig {
        let t = &self.train;
        AdamConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
            max_grad_norm: (t.max_grad_norm > 0.0).then_some(t.max_grad_norm),
        }
    }

    fn base_train(&self, steps: usize, lr: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch: t.batch,
            steps,
            lr,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            adam: self.adam(),
            ..TrainConfig::default()
        }
    }

    pub fn teacher_config(&self) -> Result<TeacherTrainConfig> {
        let t = &self.train.teacher;
        Ok(TeacherTrainConfig {
            train: self.base_train(t.steps, t.lr),
            data: self.synth(),
            objective: parse("train.teacher.objective", &t.objective)?,
        })
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let d = &self.train.distill;
        Ok(DistillConfig { train: self.base_train(d.steps, d.lr), pool: d.pool, heldout: d.heldout, teacher_steps: d.teacher_steps })
    }

    pub fn inverter_config(&self) -> Result<InverterTrainConfig> {
        let i = &self.train.inverter;
        let mut train = self.base_train(i.steps, i.lr);
        train.disc_lr = i.disc_lr;
        train.weights = LossWeights {
            noise: i.lambda_noise,
            image: i.lambda_image,
            recons: i.lambda_recons,
            reg: i.lambda_reg,
            adv: i.lambda_adv,
        };
        train.reduction = match i.reduction.as_str() {
            "all" => MaskedReduction::AllElements,
            "unmasked" => MaskedReduction::Unmasked,
            other => bail!("train.inverter.reduction: unknown reduction {other:?} (all|unmasked)"),
        };
        Ok(InverterTrainConfig { train, reblend: i.reblend, masks: self.mask_family()?, mask_cfg: self.mask_config() })
    }

    pub fn inits(&self) -> Result<Vec<InitMode>> {
        self.eval.inits.iter().map(|s| parse("eval.inits", s)).collect()
    }

    pub fn blend(&self) -> Result<BlendOptions> {
        let timing = match self.eval.blend_timing.as_str() {
            "after-update" => BlendTiming::AfterUpdate,
            "before-model" => BlendTiming::BeforeModel,
            other => bail!("eval.blend_timing: unknown timing {other:?} (after-update|before-model)"),
        };
        Ok(BlendOptions { timing, fresh_noise: self.eval.fresh_blend_noise })
    }

    pub fn probe(&self) -> ProbeConfig {
        let e = &self.eval;
        ProbeConfig {
            channels: e.probe_channels.into(),
            steps: e.probe_steps,
            batch: e.probe_batch,
            lr: e.probe_lr,
            seed: e.seed,
            heldout: e.probe_heldout,
        }
    }
}

fn span_hint(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!("at line {line}")
        }
        None => "while parsing".into(),
    }
}
