use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use countbridge::bridge::BridgeSchedule;
use countbridge::datasets::{self, GroupDataset};
use countbridge::deconv::{AggregateTrainConfig, Rounding};
use countbridge::denoiser::{load_checkpoint, save_checkpoint, LogRow, Mlp, TrainConfig, TrainedModel};
use countbridge::experiments;
use countbridge::samplers::{poisson_sample, RngState};
use countbridge::scoring::DEFAULT_W2_POINTS;
use countbridge::verify;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Default root for relative output paths.
const OUT_ROOT_ENV: &str = "COUNTBRIDGE_OUT";

#[derive(Parser)]
#[command(name = "countbridge", version, about = "Count bridges on integer lattices")]
struct Cli {
    /// Threads for sampling stages; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV + JSON sidecar).
    Gen(GenArgs),
    /// Train a denoiser on a paired dataset.
    Train(TrainArgs),
    /// Draw samples from a trained checkpoint.
    Sample(SampleArgs),
    /// Compare samples to a reference set.
    Eval(EvalArgs),
    /// Train from aggregates or deconvolve groups.
    Deconv(DeconvArgs),
    /// Run an oracle suite and report per-case results.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize, Debug)]
#[serde(rename_all = "lowercase")]
enum GenKind {
    Moons,
    Lowrank,
    Deconv,
}

#[derive(Args)]
struct GenArgs {
    kind: GenKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows for moons/lowrank.
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    /// Ambient dimension for lowrank.
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long = "G", default_value_t = 4)]
    group_size: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 5000)]
    groups: usize,
    #[arg(long, default_value_t = datasets::DECONV_POOL)]
    pool: usize,
}

/// Flags shared by both training commands; unset flags fall back to the
/// config file, then to defaults.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    m_samples: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Symmetric birth/death rate.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset whose x1 columns are the sources.
    #[arg(long, conflicts_with = "poisson_rate")]
    data: Option<PathBuf>,
    /// Draw sources from Poisson(rate) per coordinate instead.
    #[arg(long)]
    poisson_rate: Option<f64>,
    /// Number of samples; defaults to every source row of --data.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 32)]
    nfe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the raw parameters instead of the EMA ones.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Divide coordinates by this; defaults to the reference's value range.
    #[arg(long)]
    scale: Option<f64>,
    /// Subsample size for the exact W2 assignment.
    #[arg(long, default_value_t = DEFAULT_W2_POINTS)]
    w2_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum DeconvMode {
    Train,
    Infer,
}

#[derive(Args)]
struct DeconvArgs {
    #[arg(long, value_enum)]
    mode: DeconvMode,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to deconvolve with (infer mode).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    rounding: Option<RoundingArg>,
    /// Reverse steps for inference.
    #[arg(long, default_value_t = 32)]
    nfe: usize,
    #[arg(long)]
    estep_nfe: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoundingArg {
    Exact,
    Randomized,
    Round,
}

impl From<RoundingArg> for Rounding {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::Exact => Rounding::Exact,
            RoundingArg::Randomized => Rounding::Randomized,
            RoundingArg::Round => Rounding::Round,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(verify::SUITES))]
    suite: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Resolved configuration recorded next to every training output.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    train: TrainConfig,
    schedule: BridgeSchedule,
    aggregate: AggregateTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), schedule: BridgeSchedule::symmetric(32.0), aggregate: Default::default() }
    }
}

/// A problem with how the command was invoked (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Relative paths resolve under `$COUNTBRIDGE_OUT` when it is set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn resolve(flags: &TrainFlags) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = match &flags.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.epochs = flags.epochs.unwrap_or(t.epochs);
    t.lr = flags.lr.unwrap_or(t.lr);
    t.batch_size = flags.batch_size.unwrap_or(t.batch_size);
    t.m_samples = flags.m_samples.unwrap_or(t.m_samples);
    t.beta = flags.beta.unwrap_or(t.beta);
    t.seed = flags.seed.unwrap_or(t.seed);
    if let Some(l) = flags.lambda {
        cfg.schedule = BridgeSchedule::new(l, l, cfg.schedule.shape).map_err(|e| usage(e.to_string()))?;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn write_log(path: &Path, log: &[LogRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn save_run(dir: &Path, model: &TrainedModel, cfg: &RunConfig, extra: serde_json::Value) -> anyhow::Result<()> {
    let mut extra = extra;
    extra["schedule"] = serde_json::to_value(cfg.schedule)?;
    save_checkpoint(dir, model, Some(&cfg.train), extra)?;
    write_log(&dir.join("train_log.csv"), &model.log)?;
    write_json(&dir.join("config.json"), cfg)?;
    if let (Some(first), Some(last)) = (model.log.first(), model.log.last()) {
        eprintln!("trained {} steps: loss {:.5} -> {:.5}", model.steps, first.loss, last.loss);
    }
    Ok(())
}

/// Load the EMA (or raw) model, its schedule and value range.
fn load_model(dir: &Path, raw: bool) -> anyhow::Result<(Mlp, BridgeSchedule, i64)> {
    let (r, e, manifest) = load_checkpoint(dir)?;
    let schedule: BridgeSchedule = serde_json::from_value(manifest.extra["schedule"].clone())
        .context("checkpoint manifest lacks a bridge schedule")?;
    let range = manifest.extra["value_range"].as_i64().unwrap_or(manifest.architecture.value_scale as i64);
    Ok((if raw { r } else { e }, schedule, range))
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let out = out_path(&a.out);
    let mut rng = RngState::new(a.seed);
    match a.kind {
        GenKind::Moons => datasets::write_paired(&out, &datasets::gen_discrete_moons(&mut rng, a.n, a.seed)?)?,
        GenKind::Lowrank => datasets::write_paired(&out, &datasets::gen_lowrank_gmm(&mut rng, a.n, a.d, a.seed)?)?,
        GenKind::Deconv => {
            let ds = datasets::gen_deconv_groups(&mut rng, a.groups, a.group_size, a.alpha, a.pool, a.seed)?;
            datasets::write_groups(&out, &ds)?
        }
    }
    let (csv, json) = datasets::dataset_paths(&out);
    println!("{}\n{}", csv.display(), json.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.flags)?;
    let data = datasets::read_paired(&a.data)?;
    let model = experiments::train_paired(&data, &cfg.schedule, &cfg.train)?;
    let out = out_path(&a.out);
    save_run(&out, &model, &cfg, serde_json::json!({ "value_range": data.meta.value_range }))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs, workers: usize) -> anyhow::Result<()> {
    if a.nfe == 0 {
        return Err(usage("--nfe must be at least 1"));
    }
    let (model, schedule, range) = load_model(&a.checkpoint, a.raw)?;
    let d = model.config().input_dim;
    let x1: Array2<i64> = match (&a.data, a.poisson_rate) {
        (Some(p), _) => {
            let data = datasets::read_paired(p)?;
            let n = a.n.unwrap_or(data.x1.nrows()).min(data.x1.nrows());
            data.x1.slice(ndarray::s![..n, ..]).to_owned()
        }
        (None, Some(rate)) => {
            let n = a.n.ok_or_else(|| usage("--n is required with --poisson-rate"))?;
            let mut rng = RngState::with_stream(a.seed, 1);
            let mut x1 = Array2::zeros((n, d));
            for v in x1.iter_mut() {
                *v = poisson_sample(&mut rng, rate)? as i64;
            }
            x1
        }
        (None, None) => return Err(usage("give a source with --data or --poisson-rate")),
    };
    let samples = experiments::sample(&model, &schedule, x1.view(), None, a.nfe, a.seed, workers)?;
    let out = out_path(&a.out);
    let (csv, json) = datasets::dataset_paths(&out);
    let header: Vec<String> = (0..d).map(|j| format!("x0_{j}")).collect();
    datasets::write_int_csv(&csv, &header, samples.view())?;
    write_json(
        &json,
        &serde_json::json!({
            "checkpoint": a.checkpoint, "source": a.data, "poisson_rate": a.poisson_rate,
            "n": samples.nrows(), "nfe": a.nfe, "seed": a.seed, "ema": !a.raw, "value_range": range,
        }),
    )?;
    println!("{}", csv.display());
    Ok(())
}

/// Rows of a CSV as points: the `x0_*` columns if present, else all columns.
fn load_points(path: &Path) -> anyhow::Result<(Array2<i64>, Option<f64>)> {
    let (csv, json) = datasets::dataset_paths(path);
    let (header, data) = datasets::read_int_csv(&csv)?;
    let points = datasets::columns_with_prefix(&header, data.view(), "x0_").unwrap_or(data);
    let range = std::fs::read_to_string(&json)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["value_range"].as_f64());
    Ok((points, range))
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: countbridge::scoring::MetricReport,
    scale: f64,
    samples: PathBuf,
    reference: PathBuf,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let (samples, srange) = load_points(&a.samples)?;
    let (reference, rrange) = load_points(&a.reference)?;
    if samples.ncols() != reference.ncols() {
        bail!("dimension mismatch: samples have {} columns, reference {}", samples.ncols(), reference.ncols());
    }
    let scale = a.scale.or(rrange).or(srange).unwrap_or(1.0);
    let metrics = experiments::normalized_metrics(samples.view(), reference.view(), scale, a.w2_points, a.seed)?;
    let report = EvalReport { metrics, scale, samples: a.samples, reference: a.reference };
    write_json(&out_path(&a.out), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_deconv(a: DeconvArgs) -> anyhow::Result<()> {
    let data: GroupDataset = datasets::read_groups(&a.data)?;
    let out = out_path(&a.out);
    match a.mode {
        DeconvMode::Train => {
            let mut cfg = resolve(&a.flags)?;
            if let Some(r) = a.rounding {
                cfg.aggregate.rounding = r.into();
            }
            cfg.aggregate.estep_nfe = a.estep_nfe.unwrap_or(cfg.aggregate.estep_nfe);
            let model = experiments::train_groups(&data, &cfg.schedule, &cfg.train, &cfg.aggregate)?;
            save_run(&out, &model, &cfg, serde_json::json!({ "value_range": data.meta.value_range }))?;
            println!("{}", out.display());
        }
        DeconvMode::Infer => {
            let ckpt = a.checkpoint.as_ref().ok_or_else(|| usage("--mode infer needs --checkpoint"))?;
            if a.nfe == 0 {
                return Err(usage("--nfe must be at least 1"));
            }
            let (model, schedule, range) = load_model(ckpt, false)?;
            let rounding: Rounding = a.rounding.map(Into::into).unwrap_or_default();
            let seed = a.flags.seed.unwrap_or(0);
            let units = experiments::deconvolve(&model, &schedule, &data, a.nfe, rounding, seed)?;
            let g = data.group_size();
            let mismatched = (0..data.n_groups())
                .filter(|&k| units.slice(ndarray::s![k * g..(k + 1) * g, ..]).sum_axis(Axis(0)) != data.aggregates.row(k))
                .count();
            // only exact rounding promises integer equality
            if rounding == Rounding::Exact && mismatched > 0 {
                bail!("{mismatched} groups do not match their aggregates");
            }
            std::fs::create_dir_all(&out)?;
            let header: Vec<String> = (0..units.ncols()).map(|j| format!("x0_{j}")).collect();
            datasets::write_int_csv(&out.join("units.csv"), &header, units.view())?;
            let resolved = serde_json::json!({
                "checkpoint": ckpt, "data": a.data, "nfe": a.nfe, "rounding": rounding, "seed": seed,
                "mismatched_groups": mismatched,
            });
            write_json(&out.join("config.json"), &resolved)?;
            if let Some(truth) = &data.units {
                let metrics = experiments::normalized_metrics(units.view(), truth.view(), range as f64, DEFAULT_W2_POINTS, seed)?;
                write_json(&out.join("metrics.json"), &metrics)?;
                println!("{}", serde_json::to_string(&metrics)?);
            }
        }
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<bool> {
    let report = verify::run_suite(&a.suite, a.seed)?;
    write_json(&out_path(&a.out), &report)?;
    for case in report.failures() {
        eprintln!("FAIL {}: {} (threshold {})", case.name, case.value, case.threshold);
    }
    println!("{}: {} ({} cases)", report.suite, if report.passed { "pass" } else { "FAIL" }, report.cases.len());
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let workers = cli.workers.max(1);
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Sample(a) => cmd_sample(a, workers).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Deconv(a) => cmd_deconv(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}
