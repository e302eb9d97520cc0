//! Variance schedule, forward noising, deterministic DDIM sampling and inversion.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{Scalar, Tensor};

/// Noise level of a latent: the clean end (`alpha_bar = 1`) or a schedule index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Clean,
    Noisy(usize),
}

/// Linear-beta variance schedule with precomputed cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let span = beta_end - beta_start;
        let betas = (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|&b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange { t, steps: self.steps() })
        }
    }

    pub fn alpha_bar(&self, level: Level) -> Result<f64> {
        match level {
            Level::Clean => Ok(1.0),
            Level::Noisy(t) => {
                self.check(t)?;
                Ok(self.alpha_bar[t])
            }
        }
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `level`.
    pub fn coefficients(&self, level: Level) -> Result<(f64, f64)> {
        let a = self.alpha_bar(level)?;
        Ok((libm::sqrt(a), libm::sqrt(1.0 - a)))
    }
}

/// Strictly decreasing timesteps for few-step sampling, starting at `T - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepSubset {
    steps: Vec<usize>,
}

impl TimestepSubset {
    /// `n` evenly spaced timesteps `t_i = (T - 1) - floor(i T / n)`.
    pub fn evenly(total: usize, n: usize) -> Result<Self> {
        if n > total {
            return Err(Error::InvalidSchedule(format!("{n} steps exceed schedule length {total}")));
        }
        let steps = (0..n).map(|i| total - 1 - i * total / n).collect();
        Ok(Self { steps })
    }

    pub fn from_steps(total: usize, steps: Vec<usize>) -> Result<Self> {
        let ok = steps.first().is_none_or(|&f| f == total - 1)
            && steps.windows(2).all(|w| w[0] > w[1])
            && steps.iter().all(|&t| t < total);
        if !ok {
            return Err(Error::InvalidSchedule(format!("invalid timestep subset {steps:?}")));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(from, to)` transitions of the reverse process, ending at the clean level.
    pub fn transitions(&self) -> Vec<(usize, Level)> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).map_or(Level::Clean, |&n| Level::Noisy(n))))
            .collect()
    }
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_marginal<S: Scalar>(z0: &Tensor<S>, level: Level, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    let (a, b) = sched.coefficients(level)?;
    let (a, b) = (S::from_f64(a), S::from_f64(b));
    z0.zip_map(eps, |x, e| a * x + b * e)
}

/// Forward noising with one timestep per sample along the leading axis.
pub fn forward_marginal_batch<S: Scalar>(z0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() || ts.len() != z0.batch() {
        return Err(Error::ShapeMismatch {
            op: "forward_marginal_batch",
            left: z0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let per = z0.per_sample();
    let mut out = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        let (a, b) = sched.coefficients(Level::Noisy(t))?;
        let (a, b) = (S::from_f64(a), S::from_f64(b));
        let (x, e) = (&z0.data()[i * per..(i + 1) * per], &eps.data()[i * per..(i + 1) * per]);
        out.extend(x.iter().zip(e).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(z0.shape(), out)
}

/// Output of one deterministic DDIM transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimStep<S> {
    pub z: Tensor<S>,
    pub x0_pred: Tensor<S>,
}

/// Deterministic (eta = 0) DDIM transfer of `z` from level `from` to level `to`.
pub fn ddim_step<S: Scalar>(z: &Tensor<S>, eps_pred: &Tensor<S>, from: Level, to: Level, sched: &NoiseSchedule) -> Result<DdimStep<S>> {
    let ab_from = sched.alpha_bar(from)?;
    if ab_from < 1e-8 {
        return Err(Error::DegenerateStep(ab_from));
    }
    let (sa_from, sb_from) = (libm::sqrt(ab_from), libm::sqrt(1.0 - ab_from));
    let (sa_to, sb_to) = sched.coefficients(to)?;
    let inv = S::from_f64(1.0 / sa_from);
    let sb_from = S::from_f64(sb_from);
    let x0_pred = z.zip_map(eps_pred, |z, e| (z - sb_from * e) * inv)?;
    let (sa_to, sb_to) = (S::from_f64(sa_to), S::from_f64(sb_to));
    let z = x0_pred.zip_map(eps_pred, |x, e| sa_to * x + sb_to * e)?;
    Ok(DdimStep { z, x0_pred })
}

/// Noise predictor `eps(z_t, t, c)` the samplers call.
pub trait EpsModel<S: Scalar> {
    fn predict_eps(&self, z: &Tensor<S>, t: usize, classes: &[usize]) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> EpsModel<S> for F
where
    F: Fn(&Tensor<S>, usize, &[usize]) -> Result<Tensor<S>>,
{
    fn predict_eps(&self, z: &Tensor<S>, t: usize, classes: &[usize]) -> Result<Tensor<S>> {
        self(z, t, classes)
    }
}

/// Sampler output; `x0_trace` holds one clean-image prediction per step when tracing.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled<S> {
    pub z0: Tensor<S>,
    pub x0_trace: Vec<Tensor<S>>,
}

pub fn ddim_sample<S: Scalar, M: EpsModel<S> + ?Sized>(
    z_t: &Tensor<S>,
    classes: &[usize],
    model: &M,
    steps: &TimestepSubset,
    sched: &NoiseSchedule,
    trace: bool,
) -> Result<Sampled<S>> {
    let mut z = z_t.clone();
    let mut x0_trace = Vec::new();
    for (from, to) in steps.transitions() {
        let eps = model.predict_eps(&z, from, classes)?;
        let step = ddim_step(&z, &eps, Level::Noisy(from), to, sched)?;
        if trace {
            x0_trace.push(step.x0_pred);
        }
        z = step.z;
    }
    Ok(Sampled { z0: z, x0_trace })
}

/// DDIM inversion: runs the deterministic recursion from the clean level up to `T - 1`.
///
/// Each transfer evaluates the model at its destination timestep on the
/// current latent.
pub fn ddim_invert<S: Scalar, M: EpsModel<S> + ?Sized>(
    z0: &Tensor<S>,
    classes: &[usize],
    model: &M,
    steps: &TimestepSubset,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    let mut z = z0.clone();
    let mut from = Level::Clean;
    for &t in steps.steps().iter().rev() {
        let eps = model.predict_eps(&z, t, classes)?;
        z = ddim_step(&z, &eps, from, Level::Noisy(t), sched)?.z;
        from = Level::Noisy(t);
    }
    Ok(z)
}
