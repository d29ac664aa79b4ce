//! `circuitlab`: train, evaluate, patch and analyze toy addition circuits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use circuitlab::report::{
    cmd_analyze, cmd_eval, cmd_patch, cmd_report, cmd_train, AnalyzeOptions, EvalOptions, PatchOptions, ReportOptions,
    TrainOptions,
};
use circuitlab::tasks::{DEFAULT_MAX_DIGITS, DEFAULT_SHOTS};
use circuitlab::trainer::TrainConfig;
use circuitlab::LabError;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

const SEED_ENV: &str = "CIRCUITLAB_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "circuitlab",
    version,
    about = "Circuit analysis of a toy transformer on few-shot addition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy model.
    Train(TrainArgs),
    /// Exact-match accuracy grid over m,n-digit classes.
    Eval(EvalArgs),
    /// Per-head influence maps by activation patching.
    Patch(PatchArgs),
    /// Compare influence maps: similarity, stability, heatmaps, embeddings.
    Analyze(AnalyzeArgs),
    /// Full pipeline: train, eval, patch every class, analyze.
    Report(ReportArgs),
}

/// Raised for bad arguments; exits with code 2.
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

/// Reads a JSON config. A run manifest is accepted too, in which case its
/// recorded `config` is used.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid JSON in config {}: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("config") {
            value = obj.remove("config").expect("checked key");
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn file_config<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => Ok(T::default()),
    }
}

/// Explicit flag, then config file, then `CIRCUITLAB_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn log(line: &str) {
    eprintln!("{line}");
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = file_config(a.config.as_ref())?;
    let file_seed = a.config.as_ref().map(|_| config.seed);
    config.seed = resolve_seed(a.seed, file_seed)?;
    if let Some(s) = a.steps {
        config.steps = s;
        config.warmup_steps = config.warmup_steps.min(s.saturating_sub(1));
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    let outcome = cmd_train(
        &TrainOptions {
            config,
            out: a.out.clone(),
        },
        &log,
    )?;
    if let Some((step, acc)) = outcome.best {
        log(&format!("best mean eval accuracy {acc:.4} at step {step}"));
    }
    log(&format!(
        "final loss {:.5}; wrote {}",
        outcome.final_loss,
        a.out.display()
    ));
    Ok(())
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_digits: Option<u32>,
    /// Prompts per class.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<usize>,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let f: EvalArgs = file_config(a.config.as_ref())?;
    let opts = EvalOptions {
        checkpoint: required(a.checkpoint.or(f.checkpoint), "checkpoint")?,
        out: required(a.out.or(f.out), "out")?,
        max_digits: a.max_digits.or(f.max_digits).unwrap_or(DEFAULT_MAX_DIGITS),
        samples: a.samples.or(f.samples).unwrap_or(1000),
        seed: resolve_seed(a.seed, f.seed)?,
        shots: a.shots.or(f.shots).unwrap_or(DEFAULT_SHOTS),
    };
    cmd_eval(&opts, &log)?;
    log(&format!("wrote {}", opts.out.join("accuracy.csv").display()));
    Ok(())
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PatchArgs {
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    n: Option<u32>,
    /// Patch every class with at most --max-digits digits per operand.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    all_classes: Option<bool>,
    #[arg(long)]
    max_digits: Option<u32>,
    #[arg(long)]
    shots: Option<usize>,
    /// Prompt pairs per class.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Reuse stored maps computed with the same model, seed and pair count.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    resume: Option<bool>,
    /// Also write the prompt pairs as JSON lines.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    dump_pairs: Option<bool>,
}

fn run_patch(a: PatchArgs) -> Result<()> {
    let f: PatchArgs = file_config(a.config.as_ref())?;
    let all = a.all_classes.or(f.all_classes).unwrap_or(false);
    let (m, n) = if a.m.is_some() || a.n.is_some() || a.all_classes.is_some() {
        (a.m, a.n)
    } else {
        (f.m, f.n)
    };
    let opts = PatchOptions {
        checkpoint: required(a.checkpoint.or(f.checkpoint), "checkpoint")?,
        out: required(a.out.or(f.out), "out")?,
        m,
        n,
        all_classes: all,
        max_digits: a.max_digits.or(f.max_digits).unwrap_or(DEFAULT_MAX_DIGITS),
        shots: a.shots.or(f.shots).unwrap_or(DEFAULT_SHOTS),
        pairs: a.pairs.or(f.pairs).unwrap_or(1000),
        seed: resolve_seed(a.seed, f.seed)?,
        jobs: a.jobs.or(f.jobs).unwrap_or_else(default_jobs),
        resume: a.resume.or(f.resume).unwrap_or(true),
        dump_pairs: a.dump_pairs.or(f.dump_pairs).unwrap_or(false),
    };
    let maps = cmd_patch(&opts, &log)?;
    log(&format!("{} influence maps in {}", maps.len(), opts.out.display()));
    Ok(())
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnalyzeArgs {
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory holding map_*.csv files.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stability threshold on pairwise dissimilarity.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Circuit quantile.
    #[arg(long)]
    q: Option<f64>,
    /// Quantile for the partition frequency heatmaps.
    #[arg(long)]
    heatmap_q: Option<f64>,
    #[arg(long)]
    perplexity: Option<f64>,
    /// t-SNE iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let f: AnalyzeArgs = file_config(a.config.as_ref())?;
    let mut opts = AnalyzeOptions::new(required(a.maps.or(f.maps), "maps")?, required(a.out.or(f.out), "out")?);
    opts.epsilon = a.epsilon.or(f.epsilon).unwrap_or(opts.epsilon);
    opts.q = a.q.or(f.q).unwrap_or(opts.q);
    opts.heatmap_q = a.heatmap_q.or(f.heatmap_q).unwrap_or(opts.heatmap_q);
    opts.perplexity = a.perplexity.or(f.perplexity).unwrap_or(opts.perplexity);
    opts.iterations = a.iterations.or(f.iterations).unwrap_or(opts.iterations);
    opts.seed = resolve_seed(a.seed, f.seed)?;
    let bundle = cmd_analyze(&opts, &log)?;
    log(&format!("{} files in {}", bundle.files.len() + 1, opts.out.display()));
    Ok(())
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportArgs {
    /// JSON file with any of these options; `train` holds a training config.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this checkpoint instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    #[serde(skip)]
    train_config: Option<PathBuf>,
    #[arg(skip)]
    train: Option<TrainConfig>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    max_digits: Option<u32>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    heatmap_q: Option<f64>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_report(a: ReportArgs) -> Result<()> {
    let f: ReportArgs = file_config(a.config.as_ref())?;
    let mut opts = ReportOptions::new(required(a.out.or(f.out), "out")?);
    opts.checkpoint = a.checkpoint.or(f.checkpoint);
    opts.train = match &a.train_config {
        Some(p) => read_config(p)?,
        None => f.train.unwrap_or_default(),
    };
    if let Some(s) = a.steps.or(f.steps) {
        opts.train.steps = s;
        opts.train.warmup_steps = opts.train.warmup_steps.min(s.saturating_sub(1));
    }
    opts.max_digits = a.max_digits.or(f.max_digits).unwrap_or(opts.max_digits);
    opts.eval_samples = a.eval_samples.or(f.eval_samples).unwrap_or(opts.eval_samples);
    opts.pairs = a.pairs.or(f.pairs).unwrap_or(opts.pairs);
    opts.jobs = a.jobs.or(f.jobs).unwrap_or_else(default_jobs);
    opts.epsilon = a.epsilon.or(f.epsilon).unwrap_or(opts.epsilon);
    opts.q = a.q.or(f.q).unwrap_or(opts.q);
    opts.heatmap_q = a.heatmap_q.or(f.heatmap_q).unwrap_or(opts.heatmap_q);
    opts.perplexity = a.perplexity.or(f.perplexity).unwrap_or(opts.perplexity);
    opts.iterations = a.iterations.or(f.iterations).unwrap_or(opts.iterations);
    opts.seed = resolve_seed(a.seed, f.seed)?;
    opts.train.seed = opts.seed;
    let bundle = cmd_report(&opts, &log)?;
    log(&format!(
        "{} maps, {}; report in {}",
        bundle.maps.len(),
        if bundle.stable { "stable" } else { "unstable" },
        opts.out.display()
    ));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(a).context("train failed"),
        Command::Eval(a) => run_eval(a).context("eval failed"),
        Command::Patch(a) => run_patch(a).context("patch failed"),
        Command::Analyze(a) => run_analyze(a).context("analyze failed"),
        Command::Report(a) => run_report(a).context("report failed"),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<LabError>().is_some_and(LabError::is_usage)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}
