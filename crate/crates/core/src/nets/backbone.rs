use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{he, Bound, ParamSet};
use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::num::{RngStream, Scalar, Tensor, Var};

/// Backbone output and, when requested, its feature taps.
pub struct Forward<'t, S: Scalar> {
    pub out: Var<'t, S>,
    pub taps: Vec<Var<'t, S>>,
}

fn conv_params<S: Scalar>(p: &mut ParamSet<S>, rng: &RngStream, name: &str, ci: usize, co: usize, gain: f64) -> Result<()> {
    let w = he(&mut rng.derive(name), &[co, ci, 3, 3], ci * 9, gain);
    p.push(format!("{name}.w"), w)?;
    p.push(format!("{name}.b"), Tensor::zeros(&[co]))
}

fn linear_params<S: Scalar>(p: &mut ParamSet<S>, rng: &RngStream, name: &str, fin: usize, fout: usize, gain: f64) -> Result<()> {
    let w = he(&mut rng.derive(name), &[fout, fin], fin, gain);
    p.push(format!("{name}.w"), w)?;
    p.push(format!("{name}.b"), Tensor::zeros(&[fout]))
}

fn block_params<S: Scalar>(p: &mut ParamSet<S>, rng: &RngStream, name: &str, c: usize, e: usize) -> Result<()> {
    conv_params(p, rng, &format!("{name}.c1"), c, c, 1.0)?;
    linear_params(p, rng, &format!("{name}.e"), e, c, 0.5)?;
    conv_params(p, rng, &format!("{name}.c2"), c, c, 0.2)
}

/// Fresh parameters; each tensor draws from its own stream keyed by name.
pub fn init_backbone<S: Scalar>(cfg: &BackboneConfig, rng: &RngStream) -> Result<ParamSet<S>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let e = cfg.embed_width;
    let ch = &cfg.channels;
    linear_params(&mut p, rng, "emb.l1", cfg.time_width + cfg.classes, e, 1.0)?;
    linear_params(&mut p, rng, "emb.l2", e, e, 1.0)?;
    conv_params(&mut p, rng, "in", cfg.in_channels, ch[0], 1.0)?;
    for i in 0..cfg.stages() {
        for j in 0..cfg.blocks {
            block_params(&mut p, rng, &format!("enc{i}.res{j}"), ch[i], e)?;
        }
        if i + 1 < cfg.stages() {
            conv_params(&mut p, rng, &format!("down{i}"), ch[i], ch[i + 1], 1.0)?;
        }
    }
    for i in (0..cfg.stages() - 1).rev() {
        conv_params(&mut p, rng, &format!("up{i}"), ch[i + 1], ch[i], 1.0)?;
        for j in 0..cfg.blocks {
            block_params(&mut p, rng, &format!("dec{i}.res{j}"), ch[i], e)?;
        }
    }
    conv_params(&mut p, rng, "out", ch[0], cfg.in_channels, 0.3)?;
    Ok(p)
}

/// Sinusoidal embedding of integer timesteps concatenated with one-hot classes.
fn condition<S: Scalar>(cfg: &BackboneConfig, ts: &[usize], classes: &[usize]) -> Tensor<S> {
    let half = cfg.time_width / 2;
    let width = cfg.time_width + cfg.classes;
    let mut data = Vec::with_capacity(ts.len() * width);
    for (&t, &c) in ts.iter().zip(classes) {
        let freqs = (0..half).map(|i| libm::exp(-libm::log(10_000.0) * i as f64 / half as f64));
        let angles: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(angles.iter().map(|&a| S::from_f64(libm::sin(a))));
        data.extend(angles.iter().map(|&a| S::from_f64(libm::cos(a))));
        data.extend((0..cfg.classes).map(|k| if k == c { S::ONE } else { S::ZERO }));
    }
    Tensor::new(&[ts.len(), width], data).expect("one row per sample")
}

struct Ctx<'c, 't, 'p, S: Scalar> {
    cfg: &'c BackboneConfig,
    p: &'c Bound<'t, 'p, S>,
    emb: Var<'t, S>,
}

impl<'t, S: Scalar> Ctx<'_, 't, '_, S> {
    fn conv(&self, x: Var<'t, S>, name: &str, stride: usize) -> Result<Var<'t, S>> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        x.conv2d(w, Some(b), stride, 1)
    }

    fn block(&self, x: Var<'t, S>, name: &str) -> Result<Var<'t, S>> {
        let act = self.cfg.activation;
        let h = self.conv(act.apply(x), &format!("{name}.c1"), 1)?;
        let shift = self
            .emb
            .linear(self.p.var(&format!("{name}.e.w"))?, Some(self.p.var(&format!("{name}.e.b"))?))?;
        let s = h.shape();
        let h = h.add(shift.reshape(&[s[0], s[1], 1, 1])?)?;
        let h = self.conv(act.apply(h), &format!("{name}.c2"), 1)?;
        x.add(h)
    }
}

/// Shared encoder-decoder. `ts` and `classes` hold one entry per sample.
pub fn backbone_forward<'t, S: Scalar>(
    cfg: &BackboneConfig,
    p: &Bound<'t, '_, S>,
    x: Var<'t, S>,
    ts: &[usize],
    classes: &[usize],
    want_taps: bool,
) -> Result<Forward<'t, S>> {
    let shape = x.shape();
    let f = 1usize << (cfg.stages() - 1);
    if shape.len() != 4 || shape[1] != cfg.in_channels || !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) || shape[2] < f {
        return Err(Error::InvalidShape {
            shape,
            reason: format!("backbone expects [N, {}, H, W] with H, W divisible by {f}", cfg.in_channels),
        });
    }
    if ts.len() != shape[0] || classes.len() != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "backbone conditioning",
            left: vec![shape[0]],
            right: vec![ts.len(), classes.len()],
        });
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= cfg.classes) {
        return Err(Error::InvalidConfig(format!("class {c} out of range for {} classes", cfg.classes)));
    }
    let tape = x.tape();
    let act = cfg.activation;
    let cond = tape.constant(condition::<S>(cfg, ts, classes));
    let e = act.apply(cond.linear(p.var("emb.l1.w")?, Some(p.var("emb.l1.b")?))?);
    let emb = act.apply(e.linear(p.var("emb.l2.w")?, Some(p.var("emb.l2.b")?))?);
    let ctx = Ctx { cfg, p, emb };

    let mut taps = Vec::new();
    let mut skips = Vec::with_capacity(cfg.stages());
    let mut h = ctx.conv(x, "in", 1)?;
    for i in 0..cfg.stages() {
        for j in 0..cfg.blocks {
            h = ctx.block(h, &format!("enc{i}.res{j}"))?;
        }
        skips.push(h);
        if want_taps {
            taps.push(h);
        }
        if i + 1 < cfg.stages() {
            h = ctx.conv(h, &format!("down{i}"), 2)?;
        }
    }
    for i in (0..cfg.stages() - 1).rev() {
        h = ctx.conv(h.upsample2()?, &format!("up{i}"), 1)?.add(skips[i])?;
        for j in 0..cfg.blocks {
            h = ctx.block(h, &format!("dec{i}.res{j}"))?;
        }
        if want_taps {
            taps.push(h);
        }
    }
    let out = ctx.conv(act.apply(h), "out", 1)?;
    Ok(Forward { out, taps })
}

/// `z0_hat = G(eps, c)`, evaluated with the fixed `t = T - 1` embedding.
pub fn generator_forward<'t, S: Scalar>(cfg: &BackboneConfig, p: &Bound<'t, '_, S>, eps: Var<'t, S>, classes: &[usize], steps: usize) -> Result<Var<'t, S>> {
    let ts = vec![steps - 1; classes.len()];
    Ok(backbone_forward(cfg, p, eps, &ts, classes, false)?.out)
}

/// `z_T_hat = F(z0_m, c)`; same architecture and conditioning as the generator.
pub fn inverter_forward<'t, S: Scalar>(cfg: &BackboneConfig, p: &Bound<'t, '_, S>, z0_m: Var<'t, S>, classes: &[usize], steps: usize) -> Result<Var<'t, S>> {
    generator_forward(cfg, p, z0_m, classes, steps)
}
