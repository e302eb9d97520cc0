use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{finite_or, LogRow, TrainConfig, TrainObserver, TrainState, Trainable};
use crate::error::{Error, Result};
use crate::losses::{adv_disc_loss, adv_gen_loss, adv_t_range, final_loss, AdvContext, LossInputs};
use crate::mask::{sample_mask_batch, MaskConfig, MaskFamily};
use crate::nets::{
    denoiser_forward, generator_forward, init_from_generator, init_heads, inverter_forward, run_student, ModelConfig, ParamSet,
    Teacher, TeacherTarget,
};
use crate::num::{gauss_draw, AdamConfig, RngStream, Tape, Tensor};
use crate::schedule::{ddim_sample, forward_marginal_batch, NoiseSchedule, TimestepSubset};
use crate::synth::{gen_batch, SynthSpec};

/// Regression target of the teacher loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TeacherObjective {
    /// MSE on the raw network output against its own target (v or eps).
    #[default]
    Native,
    /// MSE on the derived eps prediction.
    Eps,
}

impl TeacherObjective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Native => "native",
            Self::Eps => "eps",
        }
    }
}

impl core::str::FromStr for TeacherObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            "eps" => Ok(Self::Eps),
            _ => Err(Error::InvalidConfig(format!("unknown teacher objective {s:?} (native|eps)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrainConfig {
    pub train: TrainConfig,
    pub data: SynthSpec,
    pub objective: TeacherObjective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// Number of precomputed (noise, class, target) triples.
    pub pool: usize,
    /// Held-out triples used only for evaluation.
    pub heldout: usize,
    /// DDIM steps of the teacher when producing targets.
    pub teacher_steps: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pool: 1024,
            heldout: 128,
            teacher_steps: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverterTrainConfig {
    pub train: TrainConfig,
    /// Replace masked cells of the predicted latent by fresh noise before the generator.
    pub reblend: bool,
    pub masks: MaskFamily,
    pub mask_cfg: MaskConfig,
}

impl Default for InverterTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            reblend: true,
            masks: MaskFamily::Mixed,
            mask_cfg: MaskConfig::default(),
        }
    }
}

pub fn fresh_state(params: ParamSet<f32>, adam: AdamConfig) -> TrainState {
    TrainState {
        step: 0,
        model: Trainable::new(params, adam),
        disc: None,
    }
}

/// Inverter initialised from the generator; heads are created only when `with_disc`.
pub fn fresh_inverter_state(model: &ModelConfig, generator: &ParamSet<f32>, seed: u64, with_disc: bool, adam: AdamConfig) -> Result<TrainState> {
    let inv = init_from_generator(&model.student, &model.student, generator)?;
    let disc = if with_disc {
        let heads = init_heads(&model.heads, &model.teacher.tap_channels(), model.teacher.classes, &RngStream::new(seed, "heads-init"))?;
        Some(Trainable::new(heads, adam))
    } else {
        None
    };
    Ok(TrainState {
        step: 0,
        model: Trainable::new(inv, adam),
        disc,
    })
}

fn should_log(cfg: &TrainConfig, step: usize) -> bool {
    step.is_multiple_of(cfg.log_every) || step == cfg.steps
}

fn maybe_checkpoint(cfg: &TrainConfig, state: &TrainState, obs: &mut dyn TrainObserver) -> Result<()> {
    let periodic = cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every);
    if periodic || state.step == cfg.steps {
        obs.on_checkpoint(state)?;
    }
    Ok(())
}

fn check_resume(cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    cfg.validate()?;
    if state.step > cfg.steps {
        return Err(Error::InvalidConfig(format!(
            "state is at step {} beyond the configured {} steps",
            state.step, cfg.steps
        )));
    }
    Ok(())
}

/// `sqrt(ab) eps - sqrt(1-ab) x0` per sample.
fn v_target(x0: &Tensor<f32>, eps: &Tensor<f32>, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    let per = x0.per_sample();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        let (a, b) = sched.coefficients(crate::schedule::Level::Noisy(t))?;
        let (a, b) = (a as f32, b as f32);
        let r = i * per..(i + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| a * e - b * x));
    }
    Tensor::new(x0.shape(), out)
}

/// Denoiser training on synthetic images with uniform timesteps.
pub fn train_teacher(model: &ModelConfig, cfg: &TeacherTrainConfig, state: &mut TrainState, obs: &mut dyn TrainObserver) -> Result<()> {
    model.validate()?;
    cfg.data.validate()?;
    check_resume(&cfg.train, state)?;
    if cfg.data.resolution != model.resolution || cfg.data.classes != model.teacher.classes {
        return Err(Error::ConfigMismatch(format!(
            "data {}px/{} classes vs model {}px/{} classes",
            cfg.data.resolution, cfg.data.classes, model.resolution, model.teacher.classes
        )));
    }
    let sched = model.schedule.build()?;
    let root = RngStream::new(cfg.train.seed, "train-teacher");
    while state.step < cfg.train.steps {
        let k = state.step;
        let rng = root.derive_index(k as u64);
        let (x0, classes) = gen_batch(&cfg.data, cfg.train.batch, &rng.derive("data"))?;
        let classes: Vec<usize> = classes.iter().map(|c| c.id).collect();
        let mut trng = rng.derive("t");
        let ts: Vec<usize> = (0..cfg.train.batch).map(|_| trng.below(sched.steps())).collect();
        let eps: Tensor<f32> = gauss_draw(&mut rng.derive("eps"), x0.shape());
        let zt = forward_marginal_batch(&x0, &ts, &eps, &sched)?;

        let tape = Tape::new();
        let p = state.model.params.bind(&tape, true);
        let out = denoiser_forward(&model.teacher, model.teacher_target, &p, &sched, tape.constant(zt), &ts, &classes, false)?;
        let eps_mse = out.eps.sub(tape.constant(eps.clone()))?.square().mean();
        let loss = match (cfg.objective, model.teacher_target) {
            (TeacherObjective::Native, TeacherTarget::V) => {
                let v = v_target(&x0, &eps, &ts, &sched)?;
                out.raw.sub(tape.constant(v))?.square().mean()
            }
            _ => eps_mse,
        };
        let lv = finite_or(k, "teacher loss", loss.item() as f64)?;
        let grads = p.grads(&tape.backward(loss)?);
        state.model.update(&grads, cfg.train.lr)?;
        state.step += 1;
        if should_log(&cfg.train, state.step) {
            obs.on_log(&LogRow {
                step: state.step,
                terms: vec![("loss", lv), ("eps_mse", eps_mse.item() as f64)],
            })?;
        }
        maybe_checkpoint(&cfg.train, state, obs)?;
    }
    Ok(())
}

/// Fixed distillation set: noise `[P, 1, R, R]`, classes and teacher samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPool {
    pub noise: Tensor<f32>,
    pub classes: Vec<usize>,
    pub targets: Tensor<f32>,
}

impl TargetPool {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>, Tensor<f32>)> {
        let noise: Vec<_> = idx.iter().map(|&i| self.noise.sample(i)).collect();
        let targets: Vec<_> = idx.iter().map(|&i| self.targets.sample(i)).collect();
        Ok((Tensor::stack(&noise)?, idx.iter().map(|&i| self.classes[i]).collect(), Tensor::stack(&targets)?))
    }
}

/// Entry `i` draws its class and noise from `rng.derive_index(i)`; teacher sampling runs in chunks of `chunk`.
pub fn build_target_pool(
    model: &ModelConfig,
    teacher: &ParamSet<f32>,
    n: usize,
    teacher_steps: usize,
    chunk: usize,
    rng: &RngStream,
) -> Result<TargetPool> {
    if n == 0 || chunk == 0 || teacher_steps == 0 {
        return Err(Error::InvalidConfig(format!(
            "pool size ({n}), chunk ({chunk}) and teacher steps ({teacher_steps}) must be positive"
        )));
    }
    let sched = model.schedule.build()?;
    let subset = TimestepSubset::evenly(sched.steps(), teacher_steps)?;
    let shape = [1, model.teacher.in_channels, model.resolution, model.resolution];
    let mut noise = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let r = rng.derive_index(i as u64);
        classes.push(r.derive("class").below(model.teacher.classes));
        noise.push(gauss_draw::<f32>(&mut r.derive("eps"), &shape));
    }
    let noise = Tensor::stack(&noise)?;
    let t = Teacher { cfg: &model.teacher, target: model.teacher_target, params: teacher, sched: &sched };
    let mut targets = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let z: Vec<_> = (start..end).map(|i| noise.sample(i)).collect();
        let out = ddim_sample(&Tensor::stack(&z)?, &classes[start..end], &t, &subset, &sched, false)?;
        targets.extend((0..end - start).map(|i| out.z0.sample(i)));
    }
    Ok(TargetPool { noise, classes, targets: Tensor::stack(&targets)? })
}

/// Regression of the one-step generator onto pooled teacher samples.
pub fn distill_generator(
    model: &ModelConfig,
    cfg: &DistillConfig,
    pool: &TargetPool,
    state: &mut TrainState,
    obs: &mut dyn TrainObserver,
) -> Result<()> {
    model.validate()?;
    check_resume(&cfg.train, state)?;
    if pool.is_empty() {
        return Err(Error::InvalidConfig("empty distillation pool".into()));
    }
    let steps = model.schedule.steps;
    let root = RngStream::new(cfg.train.seed, "distill");
    while state.step < cfg.train.steps {
        let k = state.step;
        let mut pick = root.derive_index(k as u64).derive("pick");
        let idx: Vec<usize> = (0..cfg.train.batch).map(|_| pick.below(pool.len())).collect();
        let (noise, classes, targets) = pool.gather(&idx)?;
        let tape = Tape::new();
        let p = state.model.params.bind(&tape, true);
        let out = generator_forward(&model.student, &p, tape.constant(noise), &classes, steps)?;
        let loss = out.sub(tape.constant(targets))?.square().mean();
        let lv = finite_or(k, "distillation loss", loss.item() as f64)?;
        let grads = p.grads(&tape.backward(loss)?);
        state.model.update(&grads, cfg.train.lr)?;
        state.step += 1;
        if should_log(&cfg.train, state.step) {
            obs.on_log(&LogRow { step: state.step, terms: vec![("loss", lv)] })?;
        }
        maybe_checkpoint(&cfg.train, state, obs)?;
    }
    Ok(())
}

/// Mean squared error of the generator against pool targets.
pub fn heldout_distill_mse(model: &ModelConfig, generator: &ParamSet<f32>, pool: &TargetPool, chunk: usize) -> Result<f64> {
    let mut se = 0.0;
    for start in (0..pool.len()).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(pool.len());
        let idx: Vec<usize> = (start..end).collect();
        let (noise, classes, targets) = pool.gather(&idx)?;
        let out = run_student(&model.student, generator, &noise, &classes, model.schedule.steps)?;
        se += out.data().iter().zip(targets.data()).map(|(&a, &b)| { let d = (a - b) as f64; d * d }).sum::<f64>();
    }
    Ok(se / pool.targets.len() as f64)
}

fn nonfinite_dump(step: usize, z: &Tensor<f32>) -> Error {
    let bad: Vec<usize> = z.data().iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
    let per = z.per_sample();
    let mut samples: Vec<usize> = bad.iter().map(|i| i / per).collect();
    samples.dedup();
    Error::NonFinite(format!(
        "step {step}: predicted latent has {} non-finite of {} entries; samples {:?}; first index {:?}",
        bad.len(),
        z.len(),
        samples,
        bad.first()
    ))
}

pub struct Frozen<'a> {
    pub teacher: &'a ParamSet<f32>,
    pub generator: &'a ParamSet<f32>,
}

/// Inverter training on generated image, mask and prompt triplets.
///
/// Each step: draw `(eps, c)`, render `z0 = G(eps, c)`, mask it, predict the
/// latent, optionally re-blend, regenerate, update the inverter on the
/// combined objective, then update the heads once when the adversarial weight is positive.
pub fn train_inverter(
    model: &ModelConfig,
    cfg: &InverterTrainConfig,
    frozen: Frozen<'_>,
    state: &mut TrainState,
    obs: &mut dyn TrainObserver,
) -> Result<()> {
    model.validate()?;
    check_resume(&cfg.train, state)?;
    cfg.mask_cfg.validate(cfg.masks, model.resolution)?;
    let w = cfg.train.weights;
    if w.adv > 0.0 && state.disc.is_none() {
        return Err(Error::InvalidConfig("adversarial weight is positive but the state has no discriminator heads".into()));
    }
    let sched = model.schedule.build()?;
    let steps = sched.steps();
    let t_range = adv_t_range(steps);
    let shape = [cfg.train.batch, model.student.in_channels, model.resolution, model.resolution];
    let root = RngStream::new(cfg.train.seed, "train-inverter");
    while state.step < cfg.train.steps {
        let k = state.step;
        let rng = root.derive_index(k as u64);
        // (1) prompt and generated image
        let mut crng = rng.derive("class");
        let classes: Vec<usize> = (0..cfg.train.batch).map(|_| crng.below(model.student.classes)).collect();
        let eps: Tensor<f32> = gauss_draw(&mut rng.derive("eps"), &shape);
        let z0 = run_student(&model.student, frozen.generator, &eps, &classes, steps)?;
        // (2) masked input
        let masks = sample_mask_batch(cfg.train.batch, model.resolution, 1, cfg.masks, &cfg.mask_cfg, &rng.derive("mask"))?;
        let m = masks.latent;
        let z0m = z0.zip_map(&m, |z, m| if m == 1.0 { 0.0 } else { z })?;
        let eps_prime: Tensor<f32> = gauss_draw(&mut rng.derive("eps_prime"), &shape);

        let tape = Tape::new();
        let fp = state.model.params.bind(&tape, true);
        let gp = frozen.generator.bind(&tape, false);
        // (3) predicted latent, (4) re-blend, (5) regenerate
        let z_hat = inverter_forward(&model.student, &fp, tape.constant(z0m), &classes, steps)?;
        if !z_hat.value().all_finite() {
            return Err(nonfinite_dump(k, &z_hat.value()));
        }
        let z_blend = if cfg.reblend { z_hat.select(tape.constant(eps_prime), &m)? } else { z_hat };
        let z0_hat = generator_forward(&model.student, &gp, z_blend, &classes, steps)?;

        // (6) inverter update
        let tp = frozen.teacher.bind(&tape, false);
        let empty = ParamSet::new();
        let hp = state.disc.as_ref().map_or(&empty, |d| &d.params).bind(&tape, false);
        let ctx = AdvContext {
            teacher_cfg: &model.teacher,
            teacher_target: model.teacher_target,
            teacher: &tp,
            heads: &hp,
            sched: &sched,
            t_range,
        };
        let z0_const = tape.constant(z0.clone());
        let inputs = LossInputs {
            z_hat,
            eps: tape.constant(eps),
            mask: m,
            z0_hat,
            z0: z0_const,
            z_blend,
        };
        let (loss, report) = final_loss(&inputs, &w, cfg.train.reduction, || {
            adv_gen_loss(&ctx, z0_hat, &classes, &mut rng.derive("adv"))
        })
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {k}: {msg}")),
            e => e,
        })?;
        let grads = fp.grads(&tape.backward(loss)?);
        state.model.update(&grads, cfg.train.lr)?;
        let fake = (*z0_hat.value()).clone();
        drop(tape);

        // (7) discriminator update
        let mut disc_loss = None;
        if w.adv > 0.0 {
            let disc = state.disc.as_mut().expect("checked above");
            let tape = Tape::new();
            let tp = frozen.teacher.bind(&tape, false);
            let hp = disc.params.bind(&tape, true);
            let ctx = AdvContext {
                teacher_cfg: &model.teacher,
                teacher_target: model.teacher_target,
                teacher: &tp,
                heads: &hp,
                sched: &sched,
                t_range,
            };
            let l = adv_disc_loss(&ctx, tape.constant(z0), tape.constant(fake), &classes, &rng.derive("disc"))?;
            disc_loss = Some(finite_or(k, "discriminator loss", l.item() as f64)?);
            let grads = hp.grads(&tape.backward(l)?);
            disc.update(&grads, cfg.train.disc_lr)?;
        }

        state.step += 1;
        if should_log(&cfg.train, state.step) {
            let mut terms = vec![
                ("total", report.total),
                ("noise", report.noise),
                ("image", report.image),
                ("recons", report.recons),
                ("reg", report.reg),
            ];
            if let (Some(a), Some(d)) = (report.adv, disc_loss) {
                terms.push(("adv", a));
                terms.push(("disc", d));
            }
            obs.on_log(&LogRow { step: state.step, terms })?;
        }
        maybe_checkpoint(&cfg.train, state, obs)?;
    }
    Ok(())
}
