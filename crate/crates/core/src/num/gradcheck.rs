//! Central finite-difference oracle for tape gradients (64-bit only).

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst elementwise relative error between autodiff and central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares `backward` of `f` against central differences with step `h`.
///
/// `f` receives one leaf per input and must return a scalar. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// dividing by round-off.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64, floor: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().cloned().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().cloned().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
