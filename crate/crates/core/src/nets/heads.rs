use alloc::format;
use alloc::vec::Vec;

use super::params::{he, Bound, ParamSet};
use super::{Activation, HeadsConfig};
use crate::error::{Error, Result};
use crate::num::{RngStream, Scalar, Tensor, Var};

/// One head per teacher tap: 1x1 conv, activation, spatial mean, then a linear
/// score plus a class-projection term.
pub fn init_heads<S: Scalar>(cfg: &HeadsConfig, tap_channels: &[usize], classes: usize, rng: &RngStream) -> Result<ParamSet<S>> {
    let h = cfg.hidden;
    let mut p = ParamSet::new();
    for (k, &c) in tap_channels.iter().enumerate() {
        let r = rng.derive_index(k as u64);
        p.push(format!("head{k}.proj.w"), he(&mut r.derive("proj"), &[h, c, 1, 1], c, 1.0))?;
        p.push(format!("head{k}.proj.b"), Tensor::zeros(&[h]))?;
        p.push(format!("head{k}.out.w"), he(&mut r.derive("out"), &[1, h], h, 0.5))?;
        p.push(format!("head{k}.out.b"), Tensor::zeros(&[1]))?;
        p.push(format!("head{k}.cls.w"), he(&mut r.derive("cls"), &[h, classes], classes, 0.5))?;
    }
    Ok(p)
}

/// Per-head scores `[N, 1]`, one entry per tap.
pub fn disc_heads_forward<'t, S: Scalar>(
    p: &Bound<'t, '_, S>,
    heads: usize,
    taps: &[Var<'t, S>],
    classes: &[usize],
    classes_total: usize,
) -> Result<Vec<Var<'t, S>>> {
    if taps.len() != heads {
        return Err(Error::InvalidConfig(format!("{} feature taps for {heads} discriminator heads", taps.len())));
    }
    let Some(first) = taps.first() else {
        return Ok(Vec::new());
    };
    let tape = first.tape();
    let n = classes.len();
    let mut onehot = Tensor::<S>::zeros(&[n, classes_total]);
    for (i, &c) in classes.iter().enumerate() {
        if c >= classes_total {
            return Err(Error::InvalidConfig(format!("class {c} out of range")));
        }
        onehot.data_mut()[i * classes_total + c] = S::ONE;
    }
    let onehot = tape.constant(onehot);
    taps.iter()
        .enumerate()
        .map(|(k, &tap)| {
            let v = |s: &str| p.var(&format!("head{k}.{s}"));
            let h = tap.conv2d(v("proj.w")?, Some(v("proj.b")?), 1, 0)?;
            let pooled = Activation::Silu.apply(h).spatial_mean()?;
            let hidden = pooled.shape()[1];
            let score = pooled.linear(v("out.w")?, Some(v("out.b")?))?;
            let proj = onehot.linear(v("cls.w")?, None)?;
            let agree = pooled.mul(proj)?.reshape(&[n, 1, hidden, 1])?.spatial_mean()?;
            score.add(agree)
        })
        .collect()
}
