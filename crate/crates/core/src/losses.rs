//! Training objectives for the inverter and the discriminator heads.
//!
//! Squared norms reduce by the mean over every element of the batch.

use alloc::format;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::ensure_binary;
use crate::nets::{coefficient_columns, denoiser_forward, disc_heads_forward, BackboneConfig, Bound, TeacherTarget};
use crate::num::{gauss_draw, RngStream, Scalar, Tensor, Var};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub noise: f64,
    pub image: f64,
    pub recons: f64,
    pub reg: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            noise: 1.0,
            image: 1.0,
            recons: 1.0,
            reg: 0.5,
            adv: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.noise, self.image, self.recons, self.reg, self.adv];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Denominator of the masked noise loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskedReduction {
    /// Mean over all elements; masked entries contribute zero.
    #[default]
    AllElements,
    /// Sum over unmasked elements divided by their count (0 when none).
    Unmasked,
}

fn keep_mask<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    ensure_binary(m)?;
    Ok(m.map(|v| S::ONE - v))
}

/// `|| (1 - m) (z_hat - eps) ||^2`.
pub fn masked_noise_loss<'t, S: Scalar>(z_hat: Var<'t, S>, eps: Var<'t, S>, m: &Tensor<S>, reduction: MaskedReduction) -> Result<Var<'t, S>> {
    let keep = keep_mask(m)?;
    let kept = keep.sum().to_f64();
    let diff = z_hat.sub(eps)?.mul(z_hat.tape().constant(keep))?;
    let sq = diff.square();
    Ok(match reduction {
        MaskedReduction::AllElements => sq.mean(),
        MaskedReduction::Unmasked if kept == 0.0 => sq.sum().scale(S::ZERO),
        MaskedReduction::Unmasked => sq.sum().scale(S::from_f64(1.0 / kept)),
    })
}

pub fn image_loss<'t, S: Scalar>(z0_hat: Var<'t, S>, z0: Var<'t, S>) -> Result<Var<'t, S>> {
    Ok(z0_hat.sub(z0)?.square().mean())
}

pub fn recons_loss<'t, S: Scalar>(
    z_hat: Var<'t, S>,
    eps: Var<'t, S>,
    m: &Tensor<S>,
    z0_hat: Var<'t, S>,
    z0: Var<'t, S>,
    w: &LossWeights,
    reduction: MaskedReduction,
) -> Result<Var<'t, S>> {
    let ln = masked_noise_loss(z_hat, eps, m, reduction)?;
    let li = image_loss(z0_hat, z0)?;
    ln.scale(S::from_f64(w.noise)).add(li.scale(S::from_f64(w.image)))
}

/// `| |mean(z^n)|^(1/n) - mu_n^(1/n) |` per sample against `N(0, 1)`, averaged over the batch.
pub fn moment_loss<S: Scalar>(z: Var<'_, S>, n: u32) -> Result<Var<'_, S>> {
    match n {
        1 => Ok(z.mean_per_sample().abs().mean()),
        2 => Ok(z.square().mean_per_sample().sqrt().offset(-S::ONE).abs().mean()),
        _ => Err(Error::InvalidConfig(format!("moment order {n} unsupported; use 1 or 2"))),
    }
}

/// First plus second moment loss.
pub fn gauss_reg_loss<S: Scalar>(z: Var<'_, S>) -> Result<Var<'_, S>> {
    moment_loss(z, 1)?.add(moment_loss(z, 2)?)
}

fn sum_heads<'t, S: Scalar>(scores: &[Var<'t, S>], f: impl Fn(Var<'t, S>) -> Var<'t, S>) -> Result<Var<'t, S>> {
    let (first, rest) = scores
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("no discriminator heads".into()))?;
    rest.iter().try_fold(f(*first), |acc, &s| acc.add(f(s)))
}

/// `-mean_batch(sum_k D_k)`.
pub fn hinge_gen<'t, S: Scalar>(scores: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    Ok(sum_heads(scores, |s| s)?.mean().neg())
}

/// `mean_batch(sum_k relu(1 - D_k(real)) + relu(1 + D_k(fake)))`.
pub fn hinge_disc<'t, S: Scalar>(real: &[Var<'t, S>], fake: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let r = sum_heads(real, |s| s.neg().offset(S::ONE).relu())?;
    let f = sum_heads(fake, |s| s.offset(S::ONE).relu())?;
    Ok(r.add(f)?.mean())
}

/// Frozen teacher feature space plus discriminator heads.
pub struct AdvContext<'t, 'p, 'c, S: Scalar> {
    pub teacher_cfg: &'c BackboneConfig,
    pub teacher_target: TeacherTarget,
    pub teacher: &'c Bound<'t, 'p, S>,
    pub heads: &'c Bound<'t, 'p, S>,
    pub sched: &'c NoiseSchedule,
    /// Inclusive timestep range for noising.
    pub t_range: (usize, usize),
}

/// Default adversarial range `[ceil(0.02 T), floor(0.98 T)]`.
pub fn adv_t_range(steps: usize) -> (usize, usize) {
    ((steps * 2).div_ceil(100), steps * 98 / 100)
}

impl<'t, S: Scalar> AdvContext<'t, '_, '_, S> {
    fn draw_t(&self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        let (lo, hi) = self.t_range;
        (0..n).map(|_| lo + rng.below(hi - lo + 1)).collect()
    }

    /// Noises `z0` to a random level and scores it with every head.
    pub fn scores(&self, z0: Var<'t, S>, classes: &[usize], rng: &mut RngStream) -> Result<Vec<Var<'t, S>>> {
        let shape = z0.shape();
        let ts = self.draw_t(shape[0], rng);
        let eps: Tensor<S> = gauss_draw(rng, &shape);
        let (sa, sb) = coefficient_columns::<S>(self.sched, &ts)?;
        let tape = z0.tape();
        let zt = z0.mul(tape.constant(sa))?.add(tape.constant(eps.mul(&broadcast_col(&sb, &shape))?))?;
        let out = denoiser_forward(self.teacher_cfg, self.teacher_target, self.teacher, self.sched, zt, &ts, classes, true)?;
        let heads = self.teacher_cfg.tap_channels().len();
        disc_heads_forward(self.heads, heads, &out.taps, classes, self.teacher_cfg.classes)
    }
}

fn broadcast_col<S: Scalar>(col: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let per: usize = shape[1..].iter().product();
    let data = col.data().iter().flat_map(|&v| core::iter::repeat_n(v, per)).collect();
    Tensor::new(shape, data).expect("column per sample")
}

pub fn adv_gen_loss<'t, S: Scalar>(ctx: &AdvContext<'t, '_, '_, S>, z0_hat: Var<'t, S>, classes: &[usize], rng: &mut RngStream) -> Result<Var<'t, S>> {
    hinge_gen(&ctx.scores(z0_hat, classes, rng)?)
}

/// Both inputs must already be detached from generator and inverter parameters.
pub fn adv_disc_loss<'t, S: Scalar>(
    ctx: &AdvContext<'t, '_, '_, S>,
    z0_real: Var<'t, S>,
    z0_fake: Var<'t, S>,
    classes: &[usize],
    rng: &RngStream,
) -> Result<Var<'t, S>> {
    let real = ctx.scores(z0_real, classes, &mut rng.derive("real"))?;
    let fake = ctx.scores(z0_fake, classes, &mut rng.derive("fake"))?;
    hinge_disc(&real, &fake)
}

/// Per-term values of one evaluation of the inverter objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub noise: f64,
    pub image: f64,
    pub recons: f64,
    pub reg: f64,
    /// `None` when the adversarial path was skipped.
    pub adv: Option<f64>,
    pub total: f64,
}

pub struct LossInputs<'t, S: Scalar> {
    pub z_hat: Var<'t, S>,
    pub eps: Var<'t, S>,
    pub mask: Tensor<S>,
    pub z0_hat: Var<'t, S>,
    pub z0: Var<'t, S>,
    pub z_blend: Var<'t, S>,
}

/// `recons * (noise L_noise + image L_image) + reg L_reg + adv L_adv`.
///
/// `adv` runs only when its weight is positive.
pub fn final_loss<'t, S: Scalar>(
    inputs: &LossInputs<'t, S>,
    w: &LossWeights,
    reduction: MaskedReduction,
    adv: impl FnOnce() -> Result<Var<'t, S>>,
) -> Result<(Var<'t, S>, LossReport)> {
    w.validate()?;
    let c = |x: f64| S::from_f64(x);
    let ln = masked_noise_loss(inputs.z_hat, inputs.eps, &inputs.mask, reduction)?;
    let li = image_loss(inputs.z0_hat, inputs.z0)?;
    let recons = ln.scale(c(w.noise)).add(li.scale(c(w.image)))?;
    let reg = gauss_reg_loss(inputs.z_blend)?;
    let mut total = recons.scale(c(w.recons)).add(reg.scale(c(w.reg)))?;
    let mut adv_value = None;
    if w.adv > 0.0 {
        let a = adv()?;
        adv_value = Some(a.item().to_f64());
        total = total.add(a.scale(c(w.adv)))?;
    }
    let report = LossReport {
        noise: ln.item().to_f64(),
        image: li.item().to_f64(),
        recons: recons.item().to_f64(),
        reg: reg.item().to_f64(),
        adv: adv_value,
        total: total.item().to_f64(),
    };
    for (name, v) in [("noise", report.noise), ("image", report.image), ("reg", report.reg), ("total", report.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    if adv_value.is_some_and(|a| !a.is_finite()) {
        return Err(Error::NonFinite("adversarial loss".into()));
    }
    Ok((total, report))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_backbone, init_heads, Activation, HeadsConfig, ParamSet};
    use crate::num::{check_gradients, Tape};
    use alloc::vec;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn eval1(f: impl for<'t> Fn(&'t Tape<f64>) -> Result<Var<'t, f64>>) -> f64 {
        let tape = Tape::new();
        f(&tape).unwrap().item()
    }

    #[test]
    fn masked_noise_examples() {
        let all = MaskedReduction::AllElements;
        let v = eval1(|tp| masked_noise_loss(tp.constant(t(&[2], &[3.0, -1.0])), tp.constant(t(&[2], &[0.0, 0.0])), &t(&[2], &[1.0, 1.0]), all));
        assert_eq!(v, 0.0);
        let v = eval1(|tp| masked_noise_loss(tp.constant(t(&[2], &[1.0, 1.0])), tp.constant(t(&[2], &[0.0, 0.0])), &t(&[2], &[0.0, 0.0]), all));
        assert_eq!(v, 1.0);
        let v = eval1(|tp| masked_noise_loss(tp.constant(t(&[2], &[1.0, 0.0])), tp.constant(t(&[2], &[0.0, 0.0])), &t(&[2], &[0.0, 1.0]), all));
        assert_eq!(v, 0.5);
        let v = eval1(|tp| {
            masked_noise_loss(tp.constant(t(&[2], &[1.0, 0.0])), tp.constant(t(&[2], &[0.0, 0.0])), &t(&[2], &[0.0, 1.0]), MaskedReduction::Unmasked)
        });
        assert_eq!(v, 1.0);
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(masked_noise_loss(x, x, &t(&[2], &[0.5, 1.0]), all), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn masked_region_changes_do_not_matter() {
        let mut rng = RngStream::new(1, "m");
        let a: Tensor<f64> = gauss_draw(&mut rng, &[2, 1, 4, 4]);
        let e: Tensor<f64> = gauss_draw(&mut rng, &[2, 1, 4, 4]);
        let junk: Tensor<f64> = gauss_draw(&mut rng, &[2, 1, 4, 4]);
        let m = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| ((i / 3) % 2) as f64).collect()).unwrap();
        let b = a.add(&junk.mul(&m).unwrap()).unwrap();
        let la = eval1(|tp| masked_noise_loss(tp.constant(a.clone()), tp.constant(e.clone()), &m, MaskedReduction::AllElements));
        let lb = eval1(|tp| masked_noise_loss(tp.constant(b.clone()), tp.constant(e.clone()), &m, MaskedReduction::AllElements));
        assert_eq!(la, lb);
    }

    #[test]
    fn image_loss_examples_and_loop_oracle() {
        let x = t(&[3], &[0.5, -2.0, 7.0]);
        assert_eq!(eval1(|tp| image_loss(tp.constant(x.clone()), tp.constant(x.clone()))), 0.0);
        let y = x.map(|v| v + 1.0);
        assert_eq!(eval1(|tp| image_loss(tp.constant(y.clone()), tp.constant(x.clone()))), 1.0);
        let mut rng = RngStream::new(2, "i");
        let a: Tensor<f64> = gauss_draw(&mut rng, &[2, 1, 8, 8]);
        let b: Tensor<f64> = gauss_draw(&mut rng, &[2, 1, 8, 8]);
        let mut naive = 0.0;
        for i in 0..a.len() {
            let d = a.data()[i] - b.data()[i];
            naive += d * d;
        }
        naive /= a.len() as f64;
        let v = eval1(|tp| image_loss(tp.constant(a.clone()), tp.constant(b.clone())));
        assert!((v - naive).abs() < 1e-6);
    }

    #[test]
    fn recons_is_weighted_sum() {
        let mut rng = RngStream::new(3, "r");
        let [zh, e, z0h, z0]: [Tensor<f64>; 4] = core::array::from_fn(|_| gauss_draw(&mut rng, &[2, 1, 4, 4]));
        let m = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| (i % 2) as f64).collect()).unwrap();
        let red = MaskedReduction::AllElements;
        let go = |wn: f64, wi: f64| {
            let w = LossWeights { noise: wn, image: wi, ..Default::default() };
            eval1(|tp| {
                recons_loss(tp.constant(zh.clone()), tp.constant(e.clone()), &m, tp.constant(z0h.clone()), tp.constant(z0.clone()), &w, red)
            })
        };
        let ln = eval1(|tp| masked_noise_loss(tp.constant(zh.clone()), tp.constant(e.clone()), &m, red));
        let li = eval1(|tp| image_loss(tp.constant(z0h.clone()), tp.constant(z0.clone())));
        assert_eq!(go(1.0, 0.0), ln);
        assert_eq!(go(0.0, 1.0), li);
        assert!((go(1.0, 1.0) - (ln + li)).abs() < 1e-15);
    }

    fn reg_parts(z: &Tensor<f64>) -> (f64, f64, f64) {
        (
            eval1(|tp| moment_loss(tp.constant(z.clone()), 1)),
            eval1(|tp| moment_loss(tp.constant(z.clone()), 2)),
            eval1(|tp| gauss_reg_loss(tp.constant(z.clone()))),
        )
    }

    #[test]
    fn moment_identities() {
        let zeros = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let alt = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        let two = Tensor::<f64>::full(&[1, 1, 4, 4], 2.0);
        assert_eq!(reg_parts(&zeros), (0.0, 1.0, 1.0));
        assert_eq!(reg_parts(&alt), (0.0, 0.0, 0.0));
        assert_eq!(reg_parts(&two), (2.0, 1.0, 3.0));
        assert!(moment_loss(Tape::new().constant(zeros), 3).is_err());
    }

    #[test]
    fn gaussian_draw_has_small_reg_and_scale_response() {
        let z: Tensor<f64> = gauss_draw(&mut RngStream::new(4, "g"), &[1, 1, 100, 100]);
        assert!(reg_parts(&z).2 < 0.05);
        let alt = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        for a in [-3.0, -0.5, 0.0, 0.25, 1.0, 2.5] {
            let v = reg_parts(&alt.scale(a)).2;
            assert!((v - (f64::abs(a) - 1.0).abs()).abs() < 1e-12, "a={a}: {v}");
        }
    }

    #[test]
    fn reg_is_permutation_invariant() {
        let z: Tensor<f64> = gauss_draw(&mut RngStream::new(5, "p"), &[1, 1, 8, 8]);
        let mut d = z.data().to_vec();
        d.reverse();
        d.swap(3, 40);
        let p = Tensor::new(z.shape(), d).unwrap();
        assert!((reg_parts(&z).2 - reg_parts(&p).2).abs() < 1e-14);
    }

    fn consts<'t>(tp: &'t Tape<f64>, vals: &[f64]) -> Vec<Var<'t, f64>> {
        vals.iter().map(|&v| tp.constant(Tensor::full(&[3, 1], v))).collect()
    }

    #[test]
    fn hinge_identities() {
        assert_eq!(eval1(|tp| hinge_gen(&consts(tp, &[-0.5]))), 0.5);
        assert_eq!(eval1(|tp| hinge_gen(&consts(tp, &[0.0]))), 0.0);
        assert_eq!(eval1(|tp| hinge_disc(&consts(tp, &[2.0]), &consts(tp, &[-2.0]))), 0.0);
        assert_eq!(eval1(|tp| hinge_disc(&consts(tp, &[2.0]), &consts(tp, &[-0.5]))), 0.5);
        assert_eq!(eval1(|tp| hinge_disc(&consts(tp, &[0.0]), &consts(tp, &[0.0]))), 2.0);
        // heads sum before the batch mean
        assert_eq!(eval1(|tp| hinge_gen(&consts(tp, &[-0.5, -0.25]))), 0.75);
        assert!(hinge_gen::<f64>(&[]).is_err());
    }

    #[test]
    fn adv_t_range_excludes_ends() {
        assert_eq!(adv_t_range(1000), (20, 980));
        assert_eq!(adv_t_range(10), (1, 9));
    }

    #[test]
    fn elementwise_loss_gradients() {
        let mut rng = RngStream::new(6, "fd");
        let [a, b]: [Tensor<f64>; 2] = core::array::from_fn(|_| gauss_draw(&mut rng, &[2, 1, 8, 8]));
        let m = Tensor::new(&[2, 1, 8, 8], (0..128).map(|i| ((i / 5) % 2) as f64).collect()).unwrap();
        let shifted = a.map(|v| 0.7 * v + 0.3);
        for red in [MaskedReduction::AllElements, MaskedReduction::Unmasked] {
            let r = check_gradients(|_, v| masked_noise_loss(v[0], v[1], &m, red), &[a.clone(), b.clone()], 1e-6, 1e-8).unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
        let r = check_gradients(|_, v| image_loss(v[0], v[1]), &[a.clone(), b.clone()], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        for n in [1, 2] {
            let r = check_gradients(|_, v| moment_loss(v[0], n), core::slice::from_ref(&shifted), 1e-6, 1e-8).unwrap();
            assert!(r.max_rel_err < 1e-4, "n={n}: {r:?}");
        }
        let r = check_gradients(|_, v| gauss_reg_loss(v[0]), core::slice::from_ref(&shifted), 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let w = LossWeights::default();
        let r = check_gradients(
            |_, v| recons_loss(v[0], v[1], &m, v[2], v[1], &w, MaskedReduction::AllElements),
            &[a.clone(), b.clone(), shifted.clone()],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check_gradients(|_, v| hinge_disc(&[v[0]], &[v[1]]), &[a.reshape(&[128, 1]).unwrap().scale(0.3), b.reshape(&[128, 1]).unwrap().scale(0.3)], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    struct Adv {
        cfg: BackboneConfig,
        teacher: ParamSet<f64>,
        heads: ParamSet<f64>,
        sched: NoiseSchedule,
    }

    fn adv_fixture() -> Adv {
        let cfg = BackboneConfig {
            in_channels: 1,
            channels: vec![2, 3],
            blocks: 1,
            classes: 2,
            time_width: 4,
            embed_width: 3,
            activation: Activation::Silu,
        };
        let teacher = init_backbone(&cfg, &RngStream::new(7, "t")).unwrap();
        let heads = init_heads(&HeadsConfig { hidden: 3 }, &cfg.tap_channels(), 2, &RngStream::new(7, "h")).unwrap();
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        Adv { cfg, teacher, heads, sched }
    }

    #[test]
    fn adv_gen_gradient_matches_finite_differences() {
        let fx = adv_fixture();
        let z0: Tensor<f64> = gauss_draw(&mut RngStream::new(8, "z"), &[2, 1, 4, 4]);
        let r = check_gradients(
            |tape, v| {
                let tb = fx.teacher.bind(tape, false);
                let hb = fx.heads.bind(tape, false);
                let ctx = AdvContext {
                    teacher_cfg: &fx.cfg,
                    teacher_target: TeacherTarget::V,
                    teacher: &tb,
                    heads: &hb,
                    sched: &fx.sched,
                    t_range: adv_t_range(20),
                };
                adv_gen_loss(&ctx, v[0], &[0, 1], &mut RngStream::new(9, "adv"))
            },
            &[z0],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn disc_loss_reaches_heads_only() {
        let fx = adv_fixture();
        let mut rng = RngStream::new(10, "d");
        let [real, fake]: [Tensor<f64>; 2] = core::array::from_fn(|_| gauss_draw(&mut rng, &[2, 1, 4, 4]));
        let tape = Tape::new();
        let tb = fx.teacher.bind(&tape, false);
        let hb = fx.heads.bind(&tape, true);
        let ctx = AdvContext {
            teacher_cfg: &fx.cfg,
            teacher_target: TeacherTarget::V,
            teacher: &tb,
            heads: &hb,
            sched: &fx.sched,
            t_range: adv_t_range(20),
        };
        let fake_v = tape.constant(fake);
        let loss = adv_disc_loss(&ctx, tape.constant(real), fake_v, &[1, 0], &RngStream::new(11, "d")).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(hb.vars().iter().any(|&v| g.wrt(v).max_abs() > 0.0));
        assert!(tb.vars().iter().all(|&v| !g.reached(v)));
        assert!(!g.reached(fake_v));
    }

    fn fixed_inputs() -> [Tensor<f64>; 5] {
        let mut rng = RngStream::new(12, "final");
        core::array::from_fn(|_| gauss_draw(&mut rng, &[2, 1, 4, 4]))
    }

    fn run_final(w: &LossWeights, adv_value: f64) -> LossReport {
        let [zh, e, z0h, z0, zb] = fixed_inputs();
        let m = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| ((i / 4) % 2) as f64).collect()).unwrap();
        let tape = Tape::new();
        let inputs = LossInputs {
            z_hat: tape.constant(zh),
            eps: tape.constant(e),
            mask: m,
            z0_hat: tape.constant(z0h),
            z0: tape.constant(z0),
            z_blend: tape.constant(zb),
        };
        final_loss(&inputs, w, MaskedReduction::AllElements, || Ok(tape.constant(Tensor::scalar(adv_value)))).unwrap().1
    }

    #[test]
    fn final_loss_weights_and_skipping() {
        let zero = LossWeights { noise: 0.0, image: 0.0, recons: 0.0, reg: 0.0, adv: 0.0 };
        let r = run_final(&zero, 7.0);
        assert_eq!(r.total, 0.0);
        assert_eq!(r.adv, None);
        let only = |f: fn(&mut LossWeights)| {
            let mut w = zero;
            f(&mut w);
            run_final(&w, 0.8)
        };
        let base = run_final(&LossWeights::default(), 0.8);
        assert_eq!(only(|w| { w.recons = 1.0; w.noise = 1.0 }).total, base.noise);
        assert_eq!(only(|w| { w.recons = 1.0; w.image = 1.0 }).total, base.image);
        assert_eq!(only(|w| w.reg = 1.0).total, base.reg);
        assert_eq!(only(|w| w.adv = 1.0).total, 0.8);
        let combined = base.recons + 0.5 * base.reg + 0.5 * 0.8;
        assert!((base.total - combined).abs() < 1e-12);
        assert!(LossWeights { noise: -1.0, ..LossWeights::default() }.validate().is_err());

        // adversarial closure never runs at zero weight
        let [zh, e, z0h, z0, zb] = fixed_inputs();
        let tape = Tape::new();
        let inputs = LossInputs {
            z_hat: tape.constant(zh),
            eps: tape.constant(e),
            mask: Tensor::zeros(&[2, 1, 4, 4]),
            z0_hat: tape.constant(z0h),
            z0: tape.constant(z0),
            z_blend: tape.constant(zb),
        };
        let w = LossWeights { adv: 0.0, ..Default::default() };
        final_loss(&inputs, &w, MaskedReduction::AllElements, || -> Result<Var<'_, f64>> { panic!("adv evaluated") }).unwrap();
    }

    #[test]
    fn final_loss_is_linear_in_each_weight() {
        for k in 0..5 {
            let at = |x: f64| {
                let mut w = LossWeights::default();
                match k {
                    0 => w.noise = x,
                    1 => w.image = x,
                    2 => w.recons = x,
                    3 => w.reg = x,
                    _ => w.adv = x,
                }
                run_final(&w, 0.3).total
            };
            let (a, b, c) = (at(0.5), at(1.5), at(2.5));
            assert!(((b - a) - (c - b)).abs() < 1e-12, "weight {k}");
        }
    }

    #[test]
    fn final_loss_regression_value() {
        let r = run_final(&LossWeights::default(), 0.25);
        assert!((r.total - FINAL_LOSS_REGRESSION).abs() < 1e-12, "{}", r.total);
    }

    const FINAL_LOSS_REGRESSION: f64 = 3.289504638350546;
}
