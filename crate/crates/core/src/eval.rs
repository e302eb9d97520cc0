//! Latent Gaussianity, background preservation, probe alignment and the component ablation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::mask::{ensure_binary, sample_mask_batch, MaskConfig, MaskFamily, MaskPair};
use crate::nets::{ModelConfig, ParamSet};
use crate::num::{adam_step, AdamConfig, AdamState, RngStream, Scalar, Tape, Tensor, Var};
use crate::pipelines::{
    fresh_inverter_state, inpaint, BlendOptions, train_inverter, Clock, Frozen, InitMode, InpaintModels, InpaintRequest, InverterTrainConfig,
    TrainObserver,
};
use crate::synth::{gen_batch, SynthSpec};

/// Histogram support shared by every JSD estimate.
pub const SUPPORT: (f64, f64) = (-5.0, 5.0);
pub const DEFAULT_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussDiag {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Natural-log JSD against the standard normal, in `[0, ln 2]`.
    pub jsd: f64,
    pub bins: usize,
    pub samples: usize,
}

/// Bin probabilities over [`SUPPORT`]; values outside land in the edge bins.
pub fn histogram<S: Scalar>(z: &[S], bins: usize) -> Vec<f64> {
    let (lo, hi) = SUPPORT;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in z {
        let v = v.to_f64();
        let b = if v.is_nan() { bins / 2 } else { ((v - lo) / width).clamp(0.0, (bins - 1) as f64) as usize };
        counts[b] += 1;
    }
    let n = z.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

/// Standard-normal mass per bin, with both tails folded into the edge bins.
pub fn normal_bin_mass(bins: usize) -> Vec<f64> {
    let (lo, hi) = SUPPORT;
    let width = (hi - lo) / bins as f64;
    (0..bins)
        .map(|i| {
            let a = if i == 0 { 0.0 } else { normal_cdf(lo + i as f64 * width) };
            let b = if i + 1 == bins { 1.0 } else { normal_cdf(lo + (i + 1) as f64 * width) };
            b - a
        })
        .collect()
}

/// Jensen-Shannon divergence of two discrete distributions, natural log.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: f64, m: f64| if a > 0.0 { a * libm::log(a / m) } else { 0.0 };
    let v: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl(a, m) + 0.5 * kl(b, m)
        })
        .sum();
    v.clamp(0.0, core::f64::consts::LN_2)
}

pub fn gauss_diagnostics<S: Scalar>(z: &[S], bins: usize) -> Result<GaussDiag> {
    if bins == 0 || z.len() < 10 * bins {
        return Err(Error::InvalidConfig(format!(
            "{} samples is too few for {bins} bins (need at least 10 per bin)",
            z.len()
        )));
    }
    let n = z.len() as f64;
    let mean = z.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in z {
        let d = v.to_f64() - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let (skewness, excess_kurtosis) = if m2 > 0.0 { (m3 / libm::pow(m2, 1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    Ok(GaussDiag {
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        jsd: jsd(&histogram(z, bins), &normal_bin_mass(bins)),
        bins,
        samples: z.len(),
    })
}

/// Per-sample MSE over unmasked pixels; a sample without unmasked pixels scores 0.
pub fn background_mse(x: &Tensor<f32>, gt: &Tensor<f32>, m: &Tensor<f32>) -> Result<Vec<f64>> {
    if x.shape() != gt.shape() || x.shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            op: "background_mse",
            left: x.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    ensure_binary(m)?;
    let per = x.per_sample();
    Ok((0..x.batch())
        .map(|i| {
            let r = i * per..(i + 1) * per;
            let (mut se, mut k) = (0.0, 0usize);
            for ((&a, &b), &mm) in x.data()[r.clone()].iter().zip(&gt.data()[r.clone()]).zip(&m.data()[r]) {
                if mm == 0.0 {
                    let d = (a - b) as f64;
                    se += d * d;
                    k += 1;
                }
            }
            if k == 0 {
                0.0
            } else {
                se / k as f64
            }
        })
        .collect())
}

/// `[case][step]` background errors of a traced run.
pub fn background_x0_trace(trace: &[Tensor<f32>], gt: &Tensor<f32>, m: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(trace.len()); gt.batch()];
    for x0 in trace {
        for (case, e) in background_mse(x0, gt, m)?.into_iter().enumerate() {
            out[case].push(e);
        }
    }
    Ok(out)
}

/// Whether sample `i` of `m` has any unmasked pixel.
pub fn has_background(m: &Tensor<f32>, i: usize) -> bool {
    let per = m.per_sample();
    m.data()[i * per..(i + 1) * per].contains(&0.0)
}

/// Fixed test set: ground truth, masked input, masks and prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCases {
    pub gt: Tensor<f32>,
    pub masked: Tensor<f32>,
    pub masks: MaskPair,
    pub classes: Vec<usize>,
}

impl EvalCases {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn rows(t: &Tensor<f32>, r: Range<usize>) -> Result<Tensor<f32>> {
        let parts: Vec<_> = r.map(|i| t.sample(i)).collect();
        Tensor::stack(&parts)
    }

    pub fn slice(&self, r: Range<usize>) -> Result<EvalCases> {
        Ok(EvalCases {
            gt: Self::rows(&self.gt, r.clone())?,
            masked: Self::rows(&self.masked, r.clone())?,
            masks: MaskPair {
                full: Self::rows(&self.masks.full, r.clone())?,
                latent: Self::rows(&self.masks.latent, r.clone())?,
            },
            classes: self.classes[r].to_vec(),
        })
    }
}

/// Synthetic images with masks from `rng.derive("mask")`; the encoder is the identity.
pub fn eval_cases(spec: &SynthSpec, n: usize, family: MaskFamily, mask_cfg: &MaskConfig, rng: &RngStream) -> Result<EvalCases> {
    let (gt, classes) = gen_batch(spec, n, &rng.derive("images"))?;
    let masks = sample_mask_batch(n, spec.resolution, 1, family, mask_cfg, &rng.derive("mask"))?;
    let masked = gt.zip_map(&masks.full, |x, m| if m == 1.0 { 0.0 } else { x })?;
    Ok(EvalCases {
        gt,
        masked,
        masks,
        classes: classes.iter().map(|c| c.id).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case_id: usize,
    pub init: InitMode,
    pub steps: usize,
    /// Background x0 error of each sampler step.
    pub trace: Vec<f64>,
    /// Background error of the pre-composite output, equal to the last trace entry.
    pub bg_mse_final: f64,
    /// Probe agreement with the requested class, when a probe is supplied.
    pub aligned: Option<bool>,
    pub init_ns: u64,
    pub sample_ns: u64,
    pub nfe: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub reports: Vec<CaseReport>,
    /// Every starting latent value, case-major; fed to [`gauss_diagnostics`].
    pub init_latents: Vec<f32>,
    pub outputs: Tensor<f32>,
}

impl EvalRun {
    /// Case-averaged trace.
    pub fn mean_trace(&self) -> Vec<f64> {
        mean_trace(&self.reports)
    }

    pub fn mean_bg_final(&self) -> f64 {
        self.reports.iter().map(|r| r.bg_mse_final).sum::<f64>() / self.reports.len().max(1) as f64
    }

    pub fn alignment(&self) -> Option<f64> {
        let flags: Option<Vec<bool>> = self.reports.iter().map(|r| r.aligned).collect();
        flags.map(|f| f.iter().filter(|&&a| a).count() as f64 / f.len().max(1) as f64)
    }
}

pub fn mean_trace(reports: &[CaseReport]) -> Vec<f64> {
    let len = reports.first().map_or(0, |r| r.trace.len());
    let mut acc = vec![0.0; len];
    for r in reports {
        for (a, &v) in acc.iter_mut().zip(&r.trace) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / reports.len().max(1) as f64).collect()
}

/// Inpaints every case in chunks of `chunk`; case `i` noise comes from `rng.derive_index(i)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    models: &InpaintModels<'_>,
    cases: &EvalCases,
    init: InitMode,
    steps: usize,
    chunk: usize,
    rng: &RngStream,
    probe: Option<&Probe>,
    clock: &dyn Clock,
) -> Result<EvalRun> {
    let chunk = chunk.max(1);
    let mut reports = Vec::with_capacity(cases.len());
    let mut init_latents = Vec::new();
    let mut outputs = Vec::with_capacity(cases.len());
    for start in (0..cases.len()).step_by(chunk) {
        let end = (start + chunk).min(cases.len());
        let part = cases.slice(start..end)?;
        let req = InpaintRequest {
            masked: &part.masked,
            mask: &part.masks,
            classes: &part.classes,
            steps,
            init,
            rng: rng.clone(),
            case_offset: start as u64,
        };
        let res = inpaint(models, &req, clock, true)?;
        let traces = background_x0_trace(&res.x0_trace, &part.gt, &part.masks.full)?;
        let aligned = match probe {
            Some(p) => probe_predict(p, &res.output)?.into_iter().zip(&part.classes).map(|(a, &b)| Some(a == b)).collect(),
            None => vec![None; end - start],
        };
        let n = (end - start) as u64;
        for (i, (trace, aligned)) in traces.into_iter().zip(aligned).enumerate() {
            reports.push(CaseReport {
                case_id: start + i,
                init,
                steps,
                bg_mse_final: trace.last().copied().unwrap_or(0.0),
                trace,
                aligned,
                init_ns: res.init_ns / n,
                sample_ns: res.sample_ns / n,
                nfe: res.nfe,
            });
            outputs.push(res.output.sample(i));
        }
        init_latents.extend_from_slice(res.init_latent.data());
    }
    Ok(EvalRun { reports, init_latents, outputs: Tensor::stack(&outputs)? })
}

/// Small strided CNN classifier over synthetic shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub channels: (usize, usize),
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out images used for the reported accuracy.
    pub heldout: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            channels: (16, 32),
            steps: 1000,
            batch: 32,
            lr: 3e-3,
            seed: 0,
            heldout: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub classes: usize,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    /// Accuracy on the first training batches.
    pub train_acc: f64,
    pub heldout_acc: f64,
}

fn init_probe(cfg: &ProbeConfig, classes: usize, rng: &RngStream) -> Result<ParamSet<f32>> {
    let (a, b) = cfg.channels;
    let mut p = ParamSet::new();
    let he = |name: &str, shape: &[usize], fan_in: usize| {
        let sd = libm::sqrt(2.0 / fan_in as f64);
        let data = rng.derive(name).normals(shape.iter().product()).into_iter().map(|z| (z * sd) as f32).collect();
        Tensor::new(shape, data)
    };
    p.push("c1.w", he("c1", &[a, 1, 3, 3], 9)?)?;
    p.push("c1.b", Tensor::zeros(&[a]))?;
    p.push("c2.w", he("c2", &[b, a, 3, 3], 9 * a)?)?;
    p.push("c2.b", Tensor::zeros(&[b]))?;
    p.push("fc.w", he("fc", &[classes, b], b)?)?;
    p.push("fc.b", Tensor::zeros(&[classes]))?;
    Ok(p)
}

fn probe_forward<'t>(p: &crate::nets::Bound<'t, '_, f32>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
    let h = x.conv2d(p.var("c1.w")?, Some(p.var("c1.b")?), 2, 1)?.silu();
    let h = h.conv2d(p.var("c2.w")?, Some(p.var("c2.b")?), 2, 1)?.silu();
    h.spatial_mean()?.linear(p.var("fc.w")?, Some(p.var("fc.b")?))
}

/// Arg-max class per image.
pub fn probe_predict(probe: &Probe, images: &Tensor<f32>) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let p = probe.params.bind(&tape, false);
    let logits = probe_forward(&p, tape.constant(images.clone()))?;
    let v = logits.value();
    Ok(v.data()
        .chunks(probe.classes)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Fraction of `outputs` the probe assigns to the requested class.
pub fn alignment_accuracy(outputs: &Tensor<f32>, classes: &[usize], probe: &Probe) -> Result<f64> {
    let pred = probe_predict(probe, outputs)?;
    if pred.len() != classes.len() {
        return Err(Error::InvalidConfig(format!("{} outputs for {} classes", pred.len(), classes.len())));
    }
    Ok(pred.iter().zip(classes).filter(|(a, b)| a == b).count() as f64 / pred.len().max(1) as f64)
}

pub fn train_probe(spec: &SynthSpec, cfg: &ProbeConfig) -> Result<(Probe, ProbeReport)> {
    spec.validate()?;
    if cfg.steps == 0 || cfg.batch == 0 || cfg.heldout == 0 {
        return Err(Error::InvalidConfig("probe steps, batch and held-out size must be positive".into()));
    }
    let root = RngStream::new(cfg.seed, "probe");
    let mut params = init_probe(cfg, spec.classes, &root.derive("init"))?;
    let mut adam = AdamState::new(params.tensors(), AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let data = root.derive("train");
    for k in 0..cfg.steps {
        let (x, c) = gen_batch(spec, cfg.batch, &data.derive_index(k as u64))?;
        let labels: Vec<usize> = c.iter().map(|c| c.id).collect();
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let loss = probe_forward(&p, tape.constant(x))?.cross_entropy(&labels)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("probe step {k}: loss {}", loss.item())));
        }
        let grads = p.grads(&tape.backward(loss)?);
        adam_step(params.tensors_mut(), &grads, &mut adam, cfg.lr)?;
    }
    let probe = Probe { classes: spec.classes, params };
    let acc = |x: &Tensor<f32>, c: &[crate::synth::PromptClass]| -> Result<f64> {
        let ids: Vec<usize> = c.iter().map(|c| c.id).collect();
        alignment_accuracy(x, &ids, &probe)
    };
    let mut train_acc = 0.0;
    let first = cfg.steps.min(4);
    for k in 0..first {
        let (x, c) = gen_batch(spec, cfg.batch, &data.derive_index(k as u64))?;
        train_acc += acc(&x, &c)? / first as f64;
    }
    let (x, c) = gen_batch(spec, cfg.heldout, &root.derive("heldout"))?;
    let heldout_acc = acc(&x, &c)?;
    Ok((probe, ProbeReport { train_acc, heldout_acc }))
}

/// One configuration of the component ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config_name: String,
    pub bg_mse_final: f64,
    /// JSD of the sampler's starting latent against `N(0, 1)`.
    pub jsd: f64,
    pub blend_mean: f64,
    pub blend_variance: f64,
    pub align: f64,
    pub final_loss: f64,
}

impl AblationRow {
    pub const COLUMNS: [&'static str; 7] = ["config_name", "bg_mse_final", "jsd", "blend_mean", "blend_variance", "align", "final_loss"];
}

/// Component ladder from `full`: reconstruction only, then Re-Blending, then
/// the Gaussian regulariser, then the adversarial term (which is `full` itself).
pub fn ladder(full: &InverterTrainConfig) -> Vec<(&'static str, InverterTrainConfig)> {
    let mut base = full.clone();
    base.reblend = false;
    base.train.weights.reg = 0.0;
    base.train.weights.adv = 0.0;
    let mut blend = base.clone();
    blend.reblend = true;
    let mut reg = blend.clone();
    reg.train.weights.reg = full.train.weights.reg;
    let mut adv = reg.clone();
    adv.train.weights.adv = full.train.weights.adv;
    vec![("baseline", base), ("+reblend", blend), ("+gaussreg", reg), ("+ladd", adv)]
}

/// Shared evaluation settings of an ablation.
pub struct AblationEval<'a> {
    pub cases: &'a EvalCases,
    pub steps: usize,
    pub chunk: usize,
    pub rng: RngStream,
    pub probe: Option<&'a Probe>,
    pub bins: usize,
    pub blend: BlendOptions,
}

/// Trains one inverter per row, evaluates it with inverfill init, and returns the rows with their inverters.
pub fn ablation_report(
    model: &ModelConfig,
    frozen: Frozen<'_>,
    rows: &[(&str, InverterTrainConfig)],
    eval: &AblationEval<'_>,
    clock: &dyn Clock,
    obs: &mut dyn FnMut(&str) -> Result<()>,
) -> Result<Vec<(AblationRow, ParamSet<f32>)>> {
    let sched = model.schedule.build()?;
    let mut out = Vec::with_capacity(rows.len());
    for (name, cfg) in rows {
        obs(name)?;
        let w = cfg.train.weights;
        let mut state = fresh_inverter_state(model, frozen.generator, cfg.train.seed, w.adv > 0.0, cfg.train.adam)?;
        let mut last = LastLoss(f64::NAN);
        let fz = Frozen { teacher: frozen.teacher, generator: frozen.generator };
        train_inverter(model, cfg, fz, &mut state, &mut last)?;
        let inverter = state.model.params;
        let models = InpaintModels {
            config: model,
            sched: &sched,
            teacher: frozen.teacher,
            inverter: Some(&inverter),
            inverter_reblend: cfg.reblend,
            inversion_steps: 0,
            blend: eval.blend,
        };
        let run = evaluate(&models, eval.cases, InitMode::Inverfill, eval.steps, eval.chunk, &eval.rng, eval.probe, clock)?;
        let diag = gauss_diagnostics(&run.init_latents, eval.bins)?;
        out.push((
            AblationRow {
                config_name: (*name).into(),
                bg_mse_final: run.mean_bg_final(),
                jsd: diag.jsd,
                blend_mean: diag.mean,
                blend_variance: diag.variance,
                align: run.alignment().unwrap_or(f64::NAN),
                final_loss: last.0,
            },
            inverter,
        ));
    }
    Ok(out)
}

struct LastLoss(f64);

impl TrainObserver for LastLoss {
    fn on_log(&mut self, row: &crate::pipelines::LogRow) -> Result<()> {
        self.0 = row.get("total").unwrap_or(f64::NAN);
        Ok(())
    }
}

/// Human-readable ladder with arrows for the change in each metric from the previous row.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let arrow = |prev: Option<f64>, cur: f64| match prev {
        None => " ",
        Some(p) if cur < p => "v",
        Some(p) if cur > p => "^",
        Some(_) => "=",
    };
    let mut s = String::from("config        bg_mse_final    jsd        align\n");
    let mut prev: Option<&AblationRow> = None;
    for r in rows {
        s.push_str(&format!(
            "{:<12} {} {:<12.6} {} {:<9.5} {} {:.3}\n",
            r.config_name,
            arrow(prev.map(|p| p.bg_mse_final), r.bg_mse_final),
            r.bg_mse_final,
            arrow(prev.map(|p| p.jsd), r.jsd),
            r.jsd,
            arrow(prev.map(|p| p.align), r.align),
            r.align
        ));
        prev = Some(r);
    }
    s.push_str("arrows compare with the row above: v lower, ^ higher, = equal\n");
    s
}
