use std::fs::{self, File};
use std::io::{ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use refdiff::denoiser::{read_checkpoint, write_checkpoint, Checkpoint, ReferencedDenoiser};
use refdiff::diffusion::sample;
use refdiff::dsp::{load_wav, mel_spectrogram, read_mels, write_mels, MelConfig, MelSpectrogram, MELS_MAGIC};
use refdiff::synthgen::{make_dataset, read_dataset, read_manifest, write_dataset, DatasetConfig, MANIFEST_NAME};
use refdiff::trainer::{
    ablation_suite, evaluate, fit_norm, prepare, prepare_sample, train_prepared, AblationConfig, EvalConfig,
    TrainConfig, Variant,
};
use refdiff::transition::{analyze, blur_regions, AnalysisParams, RegionReport};
use refdiff::Error;

use crate::args::*;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_PARAM: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: exit_code(&error),
            error,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidParameter(_) | Error::StepOutOfRange { .. } => EXIT_PARAM,
                Error::Diverged { .. } => EXIT_NUMERIC,
                _ => EXIT_INPUT,
            };
        }
        if cause.downcast_ref::<ParamError>().is_some() {
            return EXIT_PARAM;
        }
    }
    EXIT_INPUT
}

/// A bad command-line value that the library never sees.
#[derive(Debug)]
struct ParamError(String);

impl std::fmt::Display for ParamError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ParamError {}

fn param_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_PARAM,
        error: ParamError(msg.into()).into(),
    }
}

type CmdResult = Result<(), CliError>;

pub fn run(cli: &Cli) -> CmdResult {
    let ctx = Ctx {
        json: cli.json,
        out_dir: cli.out_dir.clone(),
    };
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(&ctx, a),
        Command::Blur(a) => cmd_blur(&ctx, a),
        Command::Gendata(a) => cmd_gendata(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Sample(a) => cmd_sample(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
    }
}

struct Ctx {
    json: bool,
    out_dir: PathBuf,
}

impl Ctx {
    /// `explicit` or `<out-dir>/<name>`, creating the parent directory.
    fn output_path(&self, explicit: Option<&PathBuf>, name: &str) -> Result<PathBuf, CliError> {
        let p = explicit.cloned().unwrap_or_else(|| self.out_dir.join(name));
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        Ok(p)
    }

    fn emit(&self, doc: &impl Serialize, summary: impl FnOnce() -> String) -> CmdResult {
        let text = if self.json {
            serde_json::to_string_pretty(doc).context("serializing output")?
        } else {
            summary()
        };
        match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).context("writing stdout").into()),
            _ => Ok(()),
        }
    }
}

fn write_json(path: &Path, doc: &impl Serialize) -> CmdResult {
    let mut s = serde_json::to_string_pretty(doc).context("serializing output")?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let v = serde_json::from_str(&text).with_context(|| format!("malformed JSON in {}", path.display()))?;
    Ok(v)
}

fn analysis_params(d: &DetectArgs) -> AnalysisParams {
    AnalysisParams {
        k: d.k,
        w: d.w,
        eps: d.eps,
        lambda: d.lambda,
        ..AnalysisParams::default()
    }
}

/// Reads a MELS file, or a WAV file converted with `mel`, by magic bytes.
fn load_input(path: &Path, mel: &MelConfig) -> Result<MelSpectrogram, CliError> {
    let mut magic = [0u8; 4];
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let n = f.read(&mut magic).with_context(|| format!("cannot read {}", path.display()))?;
    if n == 4 && &magic == MELS_MAGIC {
        Ok(read_mels(path)?)
    } else if n == 4 && &magic == b"RIFF" {
        let audio = load_wav(path)?;
        Ok(mel_spectrogram(&audio, mel)?)
    } else {
        Err(Error::Format(format!("{}: neither a MELS nor a WAV file", path.display())).into())
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn cmd_analyze(ctx: &Ctx, a: &AnalyzeArgs) -> CmdResult {
    let params = analysis_params(&a.detect);
    params.validate()?;
    let mel_cfg = MelConfig {
        frame: a.mel.frame,
        hop: a.mel.hop,
        n_mels: a.mel.n_mels,
        ..MelConfig::default()
    };
    let mel = load_input(&a.input, &mel_cfg)?;
    let analysis = analyze(&mel, &params)?;
    let report = RegionReport::new(&analysis, mel.hop(), &params);
    if let Some(out) = &a.output {
        let out = ctx.output_path(Some(out), "")?;
        write_json(&out, &report)?;
    }
    ctx.emit(&report, || {
        let mut s = format!(
            "{} frames, {} transition point(s), {} region(s)",
            report.total_frames,
            report.points.len(),
            report.regions.len()
        );
        for [b, e] in &report.regions {
            s.push_str(&format!("\n  [{b}, {e})"));
        }
        s
    })
}

fn cmd_blur(ctx: &Ctx, a: &BlurArgs) -> CmdResult {
    let params = AnalysisParams {
        blur_size: a.size,
        blur_sigma: a.sigma,
        ..analysis_params(&a.detect)
    };
    let kernel = params.kernel()?;
    let out = ctx.output_path(a.output.as_ref(), "blurred.mels")?;
    if same_file(&a.input, &out) {
        return Err(param_err("output must differ from the input"));
    }
    let mel = read_mels(&a.input)?;
    let (regions, source) = match &a.regions {
        Some(p) => {
            let report: RegionReport = read_json(p)?;
            let set = report.region_set()?;
            if set.total_frames() != mel.n_frames() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} frames", mel.n_frames()),
                    actual: format!("report for {} frames", set.total_frames()),
                }
                .into());
            }
            (set, "report")
        }
        None => {
            if mel.is_log() {
                return Err(param_err("log input: pass --regions, detection needs linear magnitudes"));
            }
            params.validate()?;
            (analyze(&mel, &params)?.regions, "detected")
        }
    };
    let blurred = if regions.is_empty() {
        mel.clone()
    } else {
        blur_regions(&mel, &regions, &kernel)?
    };
    write_mels(&out, &blurred)?;
    let doc = json!({
        "output": out,
        "total_frames": mel.n_frames(),
        "n_mels": mel.n_mels(),
        "hop": mel.hop(),
        "is_log": mel.is_log(),
        "regions": regions.as_pairs(),
        "region_source": source,
        "kernel": { "size": kernel.size(), "sigma": kernel.sigma() },
    });
    ctx.emit(&doc, || {
        format!(
            "blurred {} region(s) ({source}) -> {}",
            regions.regions().len(),
            out.display()
        )
    })
}

fn cmd_gendata(ctx: &Ctx, a: &GendataArgs) -> CmdResult {
    let cfg = DatasetConfig {
        min_notes: a.min_notes,
        max_notes: a.max_notes,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        strength: a.strength,
        window: a.window,
        ..DatasetConfig::default()
    };
    cfg.validate()?;
    let dir = a.out.clone().unwrap_or_else(|| ctx.out_dir.join("data"));
    let samples = make_dataset(a.n, a.seed, &cfg)?;
    write_dataset(&dir, &samples)?;
    let manifest = dir.join(MANIFEST_NAME);
    let frames: usize = samples.iter().map(|s| s.n_frames()).sum();
    let doc = json!({
        "manifest": manifest,
        "n": a.n,
        "seed": a.seed,
        "total_frames": frames,
        "config": cfg,
    });
    ctx.emit(&doc, || {
        format!("wrote {} samples ({frames} frames) -> {}", a.n, manifest.display())
    })
}

fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Prints a progress line to stderr every `every` steps.
fn progress_printer(label: String, total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step == total {
            eprintln!("{label}step {step}/{total} loss {loss:.5}");
        }
    }
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let cfg = load_train_config(&a.config, a.seed)?;
    let samples = read_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(param_err("training manifest is empty"));
    }
    let ckpt_path = ctx.output_path(a.output.as_ref(), "model.ckpt")?;
    let curve_path = match &a.loss_curve {
        Some(p) => ctx.output_path(Some(p), "")?,
        None => ckpt_path.with_extension("loss.json"),
    };

    let norm = fit_norm(&samples, cfg.log_floor)?;
    let data = prepare(&samples, &norm, &cfg)?;
    let out = train_prepared(&cfg, &data, norm, progress_printer(String::new(), cfg.total_steps))?;
    write_checkpoint(&ckpt_path, &out.checkpoint()?)?;
    write_json(
        &curve_path,
        &json!({ "loss_curve": out.loss_curve, "probe_curve": out.probe_curve }),
    )?;

    let final_probe = out.probe_curve.last().map(|p| p.loss);
    let doc = json!({
        "checkpoint": ckpt_path,
        "loss_curve_path": curve_path,
        "steps": out.loss_curve.len(),
        "final_loss": out.loss_curve.last(),
        "final_probe_loss": final_probe,
        "param_count": out.params.param_count(),
        "norm": out.norm,
        "config": out.config,
    });
    ctx.emit(&doc, || {
        format!(
            "trained {} steps, probe loss {:.5} -> {}",
            out.loss_curve.len(),
            final_probe.unwrap_or(f64::NAN),
            ckpt_path.display()
        )
    })
}

/// Training config stored in a checkpoint; older files without one get the defaults.
fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig, CliError> {
    match ck.extra.get("train_config") {
        Some(v) => Ok(serde_json::from_value(v.clone()).context("checkpoint train_config")?),
        None => Ok(TrainConfig {
            model: *ck.params.config(),
            schedule: ck.schedule,
            ..TrainConfig::default()
        }),
    }
}

fn cmd_sample(ctx: &Ctx, a: &SampleArgs) -> CmdResult {
    let ck = read_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let schedule = ck.schedule.build()?;
    if a.steps == 0 || a.steps > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t: a.steps,
            max: schedule.steps(),
        }
        .into());
    }
    let records = read_manifest(&a.manifest)?;
    let rec = records
        .get(a.index)
        .ok_or_else(|| param_err(format!("index {} outside manifest of {}", a.index, records.len())))?;
    let item = prepare_sample(&rec.load(&a.manifest)?, &ck.norm, &cfg)?;
    let bundle = item.bundle()?;
    let den = ReferencedDenoiser::new(&ck.params, &bundle, cfg.reference)?;
    let x = sample(&den, &bundle, &schedule, a.steps, a.seed)?;

    let mse = x
        .iter()
        .zip(item.target.iter())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if !mse.is_finite() {
        return Err(Error::Diverged { step: 0 }.into());
    }
    let linear = ck.norm.denormalize(&x).mapv(f64::exp);
    let out = ctx.output_path(a.output.as_ref(), "sample.mels")?;
    write_mels(&out, &MelSpectrogram::from_f64(&linear, rec.hop, false)?)?;

    let doc = json!({
        "output": out,
        "id": rec.id,
        "index": a.index,
        "steps": a.steps,
        "seed": a.seed,
        "n_mels": x.nrows(),
        "n_frames": x.ncols(),
        "mse": mse,
    });
    ctx.emit(&doc, || {
        format!(
            "sampled {} ({} steps, seed {}), normalized MSE {mse:.5} -> {}",
            rec.id,
            a.steps,
            a.seed,
            out.display()
        )
    })
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    let ck = read_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let schedule = ck.schedule.build()?;
    let mut samples = read_dataset(&a.manifest)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(param_err("evaluation set is empty"));
    }
    let data = prepare(&samples, &ck.norm, &cfg)?;
    let eval = EvalConfig {
        steps: a.steps,
        seed: a.seed,
        reference: cfg.reference,
    };
    let metrics = evaluate(&ck.params, &schedule, &data, &eval)?;
    let doc = json!({
        "n_samples": data.len(),
        "seed": a.seed,
        "metrics": metrics,
    });
    if let Some(p) = &a.output {
        write_json(&ctx.output_path(Some(p), "")?, &doc)?;
    }
    ctx.emit(&doc, || {
        format!(
            "{} samples, {} steps: global {:.5}, region {:.5}, non-region {:.5}",
            data.len(),
            metrics.steps,
            metrics.global_mse,
            metrics.region_mse,
            metrics.nonregion_mse
        )
    })
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> CmdResult {
    let base = load_train_config(&a.config, None)?;
    let variants = a
        .variants
        .iter()
        .map(|s| Variant::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if variants.is_empty() {
        return Err(param_err("no variants selected"));
    }
    let abl = AblationConfig {
        variants,
        eval_steps: a.eval_steps,
        step_sweep: a.step_sweep.clone(),
        eval_seed: a.eval_seed,
    };
    let t = base.schedule.steps;
    if let Some(&bad) = std::iter::once(&abl.eval_steps)
        .chain(&abl.step_sweep)
        .find(|&&s| s == 0 || s > t)
    {
        return Err(Error::StepOutOfRange { t: bad, max: t }.into());
    }
    let train_set = read_dataset(&a.data)?;
    let eval_set = read_dataset(&a.eval_data)?;
    let total = base.total_steps;
    let mut printers: Vec<(Variant, Box<dyn FnMut(usize, f64)>)> = Vec::new();
    let table = ablation_suite(&base, &abl, &train_set, &eval_set, |v, step, loss| {
        if printers.last().map(|p| p.0) != Some(v) {
            printers.push((v, Box::new(progress_printer(format!("[{}] ", v.name()), total))));
        }
        (printers.last_mut().unwrap().1)(step, loss)
    })?;

    let out = ctx.output_path(a.output.as_ref(), "ablation.json")?;
    write_json(&out, &table)?;
    ctx.emit(&table, || {
        let mut s = format!("{:<14}{:>8}{:>12}{:>12}{:>12}", "variant", "steps", "global", "region", "non-region");
        for r in &table.results {
            for (steps, m) in &r.metrics {
                s.push_str(&format!(
                    "\n{:<14}{:>8}{:>12.5}{:>12.5}{:>12.5}",
                    r.variant.name(),
                    steps,
                    m.global_mse,
                    m.region_mse,
                    m.nonregion_mse
                ));
            }
        }
        s.push_str(&format!("\ntable -> {}", out.display()));
        s
    })
}

