//! One function per CLI command. All artifacts land under the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use noiseinv_core::eval::{
    ablation_report, ablation_summary, eval_cases, evaluate, gauss_diagnostics, ladder, train_probe, AblationEval, AblationRow,
    EvalCases, EvalRun, Probe,
};
use noiseinv_core::nets::{decode_checkpoint, encode_checkpoint, init_backbone, ModelBundle, ModelConfig, ParamSet};
use noiseinv_core::num::RngStream;
use noiseinv_core::pipelines::{
    build_target_pool, distill_generator, fresh_inverter_state, fresh_state, heldout_distill_mse, train_inverter, train_teacher,
    Clock, Frozen, InitMode, InpaintModels, LogRow, NullClock, TrainObserver, TrainState,
};
use noiseinv_core::schedule::NoiseSchedule;

use crate::config::RunConfig;
use crate::formats::{encode_mask_pgm, encode_pgm, read_csv, write_atomic, write_csv, write_meta, Provenance};

/// Monotonic wall clock for latency reports.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

/// Which trained network a checkpoint file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Generator,
    Inverter,
}

impl Stage {
    pub fn file(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher.ivfl",
            Stage::Generator => "generator.ivfl",
            Stage::Inverter => "inverter.ivfl",
        }
    }

    pub fn log_file(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher_log.csv",
            Stage::Generator => "distill_log.csv",
            Stage::Inverter => "inverter_log.csv",
        }
    }

    /// The command that produces this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Teacher => "train-teacher",
            Stage::Generator => "distill",
            Stage::Inverter => "train-inverter",
        }
    }

    fn params(self, b: &ModelBundle) -> Option<&ParamSet<f32>> {
        match self {
            Stage::Teacher => b.teacher.as_ref(),
            Stage::Generator => b.generator.as_ref(),
            Stage::Inverter => b.inverter.as_ref(),
        }
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub sched: NoiseSchedule,
    pub prov: Provenance,
    /// Ignore existing checkpoints instead of resuming from them.
    pub fresh: bool,
    /// Progress lines go to stderr unless quiet.
    pub quiet: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        let model = cfg.model()?;
        let sched = model.schedule.build()?;
        let prov = Provenance { config_hash: cfg.hash(), seed: cfg.train.seed };
        Ok(Self { cfg, out, model, sched, prov, fresh: false, quiet: false })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn read_bundle(&self, path: &Path) -> Result<ModelBundle> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        decode_checkpoint(&bytes, Some(self.model.hash())).with_context(|| format!("loading {}", path.display()))
    }

    /// Trained parameters of a finished earlier stage, or an error naming the command that makes them.
    pub fn prerequisite(&self, stage: Stage) -> Result<ParamSet<f32>> {
        let path = self.path(stage.file());
        if !path.exists() {
            bail!(
                "missing {} checkpoint {}; run `noiseinv {}` with this config first",
                stage.command(),
                path.display(),
                stage.command()
            );
        }
        let b = self.read_bundle(&path)?;
        let want = match stage {
            Stage::Teacher => self.cfg.train.teacher.steps,
            Stage::Generator => self.cfg.train.distill.steps,
            Stage::Inverter => self.cfg.train.inverter.steps,
        };
        if (b.step as usize) < want {
            bail!(
                "{} is at step {} of {want}; finish it with `noiseinv {}` first",
                path.display(),
                b.step,
                stage.command()
            );
        }
        stage.params(&b).cloned().ok_or_else(|| anyhow!("{} holds no {} parameters", path.display(), stage.command()))
    }

    fn clock(&self) -> Box<dyn Clock> {
        if self.cfg.eval.timing {
            Box::new(WallClock::new())
        } else {
            Box::new(NullClock)
        }
    }

    fn write_bundle(&self, path: &Path, bundle: &ModelBundle, command: &str) -> Result<()> {
        write_atomic(path, &encode_checkpoint(bundle)?)?;
        write_meta(path, self.prov, command)
    }
}

/// Persists checkpoints and the training log of one stage.
struct StageWriter<'a> {
    ctx: &'a Ctx,
    stage: Stage,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    last: Option<LogRow>,
}

impl<'a> StageWriter<'a> {
    /// Keeps log rows of a resumed run up to its checkpoint step.
    fn new(ctx: &'a Ctx, stage: Stage, resumed_at: usize) -> Result<Self> {
        let mut w = Self { ctx, stage, header: Vec::new(), rows: Vec::new(), last: None };
        let log = ctx.path(stage.log_file());
        if resumed_at > 0 && log.exists() {
            let (header, rows) = read_csv(&log)?;
            w.header = header;
            w.rows = rows.into_iter().filter(|r| r.first().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= resumed_at)).collect();
        }
        Ok(w)
    }

    fn flush_log(&self) -> Result<()> {
        let header: Vec<&str> = self.header.iter().map(String::as_str).collect();
        write_csv(&self.ctx.path(self.stage.log_file()), &header, &self.rows, self.ctx.prov, self.stage.command())
    }
}

impl TrainObserver for StageWriter<'_> {
    fn on_log(&mut self, row: &LogRow) -> noiseinv_core::Result<()> {
        if self.header.is_empty() {
            self.header = std::iter::once("step".to_string()).chain(row.terms.iter().map(|(n, _)| n.to_string())).collect();
        }
        self.rows.push(std::iter::once(row.step.to_string()).chain(row.terms.iter().map(|(_, v)| v.to_string())).collect());
        self.last = Some(row.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> noiseinv_core::Result<()> {
        let to_core = |e: anyhow::Error| noiseinv_core::Error::Checkpoint(format!("{e:#}"));
        let mut b = ModelBundle {
            config_hash: self.ctx.model.hash(),
            schedule_betas: self.ctx.sched.betas().to_vec(),
            step: state.step as u64,
            extra: Some(state.export_optimizer()?),
            disc: state.disc.as_ref().map(|d| d.params.clone()),
            ..Default::default()
        };
        let p = Some(state.model.params.clone());
        match self.stage {
            Stage::Teacher => b.teacher = p,
            Stage::Generator => b.generator = p,
            Stage::Inverter => b.inverter = p,
        }
        self.ctx.write_bundle(&self.ctx.path(self.stage.file()), &b, self.stage.command()).map_err(to_core)?;
        self.flush_log().map_err(to_core)?;
        self.ctx.say(format!("{}: checkpoint at step {}", self.stage.command(), state.step));
        Ok(())
    }
}

impl Ctx {
    /// State to continue from, or `None` when training starts fresh.
    fn resume(&self, stage: Stage, steps: usize) -> Result<Option<TrainState>> {
        let path = self.path(stage.file());
        if self.fresh || !path.exists() {
            return Ok(None);
        }
        let b = self.read_bundle(&path)?;
        if b.step as usize > steps {
            bail!("{} is at step {}, beyond the configured {steps}; pass --fresh to retrain", path.display(), b.step);
        }
        let params = stage.params(&b).cloned().ok_or_else(|| anyhow!("{} holds no parameters for this stage", path.display()))?;
        let extra = b.extra.clone().ok_or_else(|| anyhow!("{} has no optimizer state to resume from", path.display()))?;
        self.say(format!("{}: resuming from step {}", stage.command(), b.step));
        Ok(Some(TrainState::restore(b.step as usize, params, b.disc.clone(), &extra, self.cfg.adam())?))
    }

    fn finish(&self, stage: Stage, w: &StageWriter, state: &TrainState) -> Result<()> {
        if let Some(row) = &w.last {
            let terms: Vec<String> = row.terms.iter().map(|(n, v)| format!("{n}={v:.5}")).collect();
            self.say(format!("{} done at step {}: {}", stage.command(), state.step, terms.join(" ")));
        }
        Ok(())
    }
}

pub fn train_teacher_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg.teacher_config()?;
    let mut state = match ctx.resume(Stage::Teacher, cfg.train.steps)? {
        Some(s) => s,
        None => fresh_state(init_backbone(&ctx.model.teacher, &RngStream::new(cfg.train.seed, "teacher-init"))?, cfg.train.adam),
    };
    if state.step == cfg.train.steps && !ctx.fresh {
        ctx.say("train-teacher: checkpoint already complete");
        return Ok(());
    }
    let mut w = StageWriter::new(ctx, Stage::Teacher, state.step)?;
    train_teacher(&ctx.model, &cfg, &mut state, &mut w)?;
    ctx.finish(Stage::Teacher, &w, &state)
}

pub fn distill_cmd(ctx: &Ctx) -> Result<()> {
    let teacher = ctx.prerequisite(Stage::Teacher)?;
    let cfg = ctx.cfg.distill_config()?;
    let mut state = match ctx.resume(Stage::Generator, cfg.train.steps)? {
        Some(s) => s,
        None => fresh_state(init_backbone(&ctx.model.student, &RngStream::new(cfg.train.seed, "generator-init"))?, cfg.train.adam),
    };
    if state.step == cfg.train.steps && !ctx.fresh {
        ctx.say("distill: checkpoint already complete");
        return Ok(());
    }
    let chunk = ctx.cfg.train.distill.chunk;
    let seed = cfg.train.seed;
    ctx.say(format!("distill: sampling {} teacher targets", cfg.pool));
    let pool = build_target_pool(&ctx.model, &teacher, cfg.pool, cfg.teacher_steps, chunk, &RngStream::new(seed, "pool"))?;
    let mut w = StageWriter::new(ctx, Stage::Generator, state.step)?;
    distill_generator(&ctx.model, &cfg, &pool, &mut state, &mut w)?;
    ctx.finish(Stage::Generator, &w, &state)?;
    if cfg.heldout > 0 {
        let held = build_target_pool(&ctx.model, &teacher, cfg.heldout, cfg.teacher_steps, chunk, &RngStream::new(seed, "heldout"))?;
        ctx.say(format!("distill: held-out mse {:.6}", heldout_distill_mse(&ctx.model, &state.model.params, &held, chunk)?));
    }
    Ok(())
}

pub fn train_inverter_cmd(ctx: &Ctx) -> Result<()> {
    let teacher = ctx.prerequisite(Stage::Teacher)?;
    let generator = ctx.prerequisite(Stage::Generator)?;
    let cfg = ctx.cfg.inverter_config()?;
    let with_disc = cfg.train.weights.adv > 0.0;
    let mut state = match ctx.resume(Stage::Inverter, cfg.train.steps)? {
        Some(s) => s,
        None => fresh_inverter_state(&ctx.model, &generator, cfg.train.seed, with_disc, cfg.train.adam)?,
    };
    if state.step == cfg.train.steps && !ctx.fresh {
        ctx.say("train-inverter: checkpoint already complete");
        return Ok(());
    }
    let mut w = StageWriter::new(ctx, Stage::Inverter, state.step)?;
    train_inverter(&ctx.model, &cfg, Frozen { teacher: &teacher, generator: &generator }, &mut state, &mut w)?;
    ctx.finish(Stage::Inverter, &w, &state)
}

pub const METRICS_COLUMNS: [&str; 7] = ["case_id", "init_mode", "steps", "bg_mse_final", "jsd", "align", "latency_ms"];
pub const TRACE_COLUMNS: [&str; 5] = ["case_id", "init_mode", "steps", "step_index", "bg_mse"];
pub const LATENCY_COLUMNS: [&str; 6] = ["init_mode", "steps", "cases", "init_ms", "sample_ms", "nfe"];

struct Evaluator<'a> {
    ctx: &'a Ctx,
    teacher: ParamSet<f32>,
    inverter: Option<ParamSet<f32>>,
    probe: Probe,
    clock: Box<dyn Clock>,
}

impl<'a> Evaluator<'a> {
    fn new(ctx: &'a Ctx, inits: &[InitMode]) -> Result<Self> {
        let teacher = ctx.prerequisite(Stage::Teacher)?;
        let inverter = if inits.contains(&InitMode::Inverfill) { Some(ctx.prerequisite(Stage::Inverter)?) } else { None };
        let (probe, rep) = train_probe(&ctx.cfg.synth(), &ctx.cfg.probe())?;
        ctx.say(format!("probe: held-out accuracy {:.3}", rep.heldout_acc));
        Ok(Self { ctx, teacher, inverter, probe, clock: ctx.clock() })
    }

    fn cases(&self, n: usize, seed: u64) -> Result<EvalCases> {
        let c = &self.ctx.cfg;
        Ok(eval_cases(&c.synth(), n, c.mask_family()?, &c.mask_config(), &RngStream::new(seed, "cases"))?)
    }

    fn run(&self, cases: &EvalCases, init: InitMode, steps: usize, seed: u64) -> Result<EvalRun> {
        let c = &self.ctx.cfg;
        let models = InpaintModels {
            config: &self.ctx.model,
            sched: &self.ctx.sched,
            teacher: &self.teacher,
            inverter: self.inverter.as_ref(),
            inverter_reblend: c.train.inverter.reblend,
            inversion_steps: c.eval.inversion_steps,
            blend: c.blend()?,
        };
        Ok(evaluate(&models, cases, init, steps, c.eval.chunk, &RngStream::new(seed, "eval"), Some(&self.probe), &*self.clock)?)
    }
}

fn metric_rows(run: &EvalRun, jsd: f64) -> Vec<Vec<String>> {
    run.reports
        .iter()
        .map(|r| {
            let align = r.aligned.map_or(String::new(), |a| u8::from(a).to_string());
            vec![
                r.case_id.to_string(),
                r.init.name().into(),
                r.steps.to_string(),
                r.bg_mse_final.to_string(),
                jsd.to_string(),
                align,
                ((r.init_ns + r.sample_ns) as f64 / 1e6).to_string(),
            ]
        })
        .collect()
}

fn run_jsd(run: &EvalRun, bins: usize) -> Result<f64> {
    Ok(gauss_diagnostics(&run.init_latents, bins)?.jsd)
}

pub struct InpaintArgs {
    pub init: InitMode,
    pub steps: usize,
    pub seed: Option<u64>,
    pub cases: usize,
}

pub fn inpaint_cmd(ctx: &Ctx, args: &InpaintArgs) -> Result<()> {
    if args.steps == 0 || args.cases == 0 {
        bail!("--steps and --cases must be positive");
    }
    let seed = args.seed.unwrap_or(ctx.cfg.eval.seed);
    let ev = Evaluator::new(ctx, &[args.init])?;
    let cases = ev.cases(args.cases, seed)?;
    let run = ev.run(&cases, args.init, args.steps, seed)?;
    let prov = Provenance { config_hash: ctx.prov.config_hash, seed };
    let dir = ctx.path("inpaint").join(format!("{}-{}", args.init.name(), args.steps));
    for i in 0..cases.len() {
        let file = |stage: &str| dir.join(format!("case_{i:04}_{stage}.pgm"));
        write_atomic(&file("input"), &encode_pgm(&cases.masked.sample(i), prov)?)?;
        write_atomic(&file("mask"), &encode_mask_pgm(&cases.masks.full.sample(i), prov)?)?;
        write_atomic(&file("output"), &encode_pgm(&run.outputs.sample(i), prov)?)?;
    }
    // appended rows replace any earlier rows of the same init and step count
    let path = ctx.path("inpaint").join("metrics.csv");
    let mut rows = if path.exists() { read_csv(&path)?.1 } else { Vec::new() };
    let (mode, steps) = (args.init.name().to_string(), args.steps.to_string());
    rows.retain(|r| !(r.get(1) == Some(&mode) && r.get(2) == Some(&steps)));
    let jsd = if run.init_latents.len() >= 10 * ctx.cfg.eval.bins { run_jsd(&run, ctx.cfg.eval.bins)? } else { f64::NAN };
    rows.extend(metric_rows(&run, jsd));
    write_csv(&path, &METRICS_COLUMNS, &rows, prov, "inpaint")?;
    let trace: Vec<String> = run.mean_trace().iter().map(|v| format!("{v:.5}")).collect();
    ctx.say(format!(
        "inpaint {} x{}: {} cases, mean background trace [{}], alignment {:.3}",
        mode,
        args.steps,
        cases.len(),
        trace.join(", "),
        run.alignment().unwrap_or(f64::NAN)
    ));
    Ok(())
}

pub fn eval_cmd(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.eval;
    let inits = ctx.cfg.inits()?;
    let ev = Evaluator::new(ctx, &inits)?;
    let cases = ev.cases(c.cases, c.seed)?;
    let prov = Provenance { config_hash: ctx.prov.config_hash, seed: c.seed };
    let (mut metrics, mut traces, mut latency) = (Vec::new(), Vec::new(), Vec::new());
    let mut summary = String::new();
    writeln!(summary, "{} cases, seed {}", cases.len(), c.seed)?;
    writeln!(summary, "init             steps  jsd       align  background trace")?;
    for &steps in &c.steps {
        for &init in &inits {
            let run = ev.run(&cases, init, steps, c.seed)?;
            let jsd = run_jsd(&run, c.bins)?;
            metrics.extend(metric_rows(&run, jsd));
            for r in &run.reports {
                for (k, v) in r.trace.iter().enumerate() {
                    traces.push(vec![r.case_id.to_string(), init.name().into(), steps.to_string(), k.to_string(), v.to_string()]);
                }
            }
            let n = run.reports.len() as f64;
            let ms = |f: fn(&noiseinv_core::eval::CaseReport) -> u64| run.reports.iter().map(|r| f(r) as f64).sum::<f64>() / n / 1e6;
            latency.push(vec![
                init.name().into(),
                steps.to_string(),
                run.reports.len().to_string(),
                ms(|r| r.init_ns).to_string(),
                ms(|r| r.sample_ns).to_string(),
                run.reports.first().map_or(0, |r| r.nfe).to_string(),
            ]);
            let trace: Vec<String> = run.mean_trace().iter().map(|v| format!("{v:.5}")).collect();
            let line = format!(
                "{:<16} {:<6} {:<9.5} {:<6.3} [{}]",
                init.name(),
                steps,
                jsd,
                run.alignment().unwrap_or(f64::NAN),
                trace.join(", ")
            );
            ctx.say(&line);
            writeln!(summary, "{line}")?;
        }
    }
    let dir = ctx.path("eval");
    write_csv(&dir.join("metrics.csv"), &METRICS_COLUMNS, &metrics, prov, "eval")?;
    write_csv(&dir.join("trace.csv"), &TRACE_COLUMNS, &traces, prov, "eval")?;
    write_csv(&dir.join("latency.csv"), &LATENCY_COLUMNS, &latency, prov, "eval")?;
    write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;
    write_meta(&dir.join("summary.txt"), prov, "eval")
}

fn row_fields(r: &AblationRow) -> Vec<String> {
    vec![
        r.config_name.clone(),
        r.bg_mse_final.to_string(),
        r.jsd.to_string(),
        r.blend_mean.to_string(),
        r.blend_variance.to_string(),
        r.align.to_string(),
        r.final_loss.to_string(),
    ]
}

/// File stem of a ladder row, e.g. `+gaussreg` becomes `plus-gaussreg`.
pub fn row_stem(name: &str) -> String {
    name.replace('+', "plus-")
}

pub fn ablate_cmd(ctx: &Ctx) -> Result<()> {
    let teacher = ctx.prerequisite(Stage::Teacher)?;
    let generator = ctx.prerequisite(Stage::Generator)?;
    let c = &ctx.cfg.eval;
    let ev = Evaluator { ctx, teacher: teacher.clone(), inverter: None, probe: train_probe(&ctx.cfg.synth(), &ctx.cfg.probe())?.0, clock: ctx.clock() };
    let cases = ev.cases(c.cases, c.seed)?;
    let eval = AblationEval {
        cases: &cases,
        steps: c.ablation_steps,
        chunk: c.chunk,
        rng: RngStream::new(c.seed, "eval"),
        probe: Some(&ev.probe),
        bins: c.bins,
        blend: ctx.cfg.blend()?,
    };
    let rows = ladder(&ctx.cfg.inverter_config()?);
    let results = ablation_report(&ctx.model, Frozen { teacher: &teacher, generator: &generator }, &rows, &eval, &*ev.clock, &mut |name| {
        ctx.say(format!("ablate: training {name}"));
        Ok(())
    })?;
    let dir = ctx.path("ablate");
    for ((row, inv), (_, cfg)) in results.iter().zip(&rows) {
        let b = ModelBundle {
            config_hash: ctx.model.hash(),
            schedule_betas: ctx.sched.betas().to_vec(),
            step: cfg.train.steps as u64,
            inverter: Some(inv.clone()),
            ..Default::default()
        };
        ctx.write_bundle(&dir.join(format!("{}.ivfl", row_stem(&row.config_name))), &b, "ablate")?;
    }
    let table: Vec<AblationRow> = results.into_iter().map(|(r, _)| r).collect();
    let csv_rows: Vec<Vec<String>> = table.iter().map(row_fields).collect();
    write_csv(&dir.join("ablation.csv"), &AblationRow::COLUMNS, &csv_rows, ctx.prov, "ablate")?;
    let summary = ablation_summary(&table);
    ctx.say(&summary);
    write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;
    write_meta(&dir.join("summary.txt"), ctx.prov, "ablate")
}
