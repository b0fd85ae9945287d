//! Command-line front end: segment transcripts, synthesize data, train, evaluate,
//! query and sweep loss weights.

pub mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ffacr_core::dataio::{read_transcript, segment_transcript, write_manifest};
use ffacr_core::eval::random_baseline_map;
use ffacr_core::retrieval::{write_results_csv, write_results_jsonl};
use ffacr_core::training::{Convergence, Plateau};
use ffacr_core::{
    build_index, evaluate_retrieval, search, synth_generate, train, AblationMode, Dataset, FfacrModel, FusionVariant,
    SynthConfig, TrainConfig, TrainError,
};

use config::{ConfigFile, List, PathArg, Resolver};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Unreadable or unwritable files.
pub const EXIT_IO: i32 = 1;
/// Invalid flags, configuration or input data.
pub const EXIT_VALIDATION: i32 = 2;
/// Training produced non-finite values.
pub const EXIT_DIVERGED: i32 = 3;

/// A bad flag value or setting.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn core_exit_code(e: &ffacr_core::Error) -> i32 {
    match e {
        ffacr_core::Error::Io { .. } => EXIT_IO,
        ffacr_core::Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_VALIDATION,
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return core_exit_code(&e.error);
        }
        if let Some(e) = cause.downcast_ref::<ffacr_core::Error>() {
            return core_exit_code(e);
        }
        if cause.is::<UsageError>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

#[derive(Debug, Parser)]
#[command(name = "ffacr", version, about = "Adversarial cross-modal text-to-video retrieval")]
pub struct Cli {
    /// File of key=value lines supplying values for flags not given on the command line
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut a transcript into one clip per ASR sentence
    Segment(SegmentArgs),
    /// Write a synthetic feature file
    Synth(SynthArgs),
    /// Split a feature file into stratified train and held-out parts
    Split(SplitArgs),
    /// Train a model
    Train(TrainArgs),
    /// Compute MAP@k and the PR curve, querying every clip's text against all clips
    Eval(EvalArgs),
    /// Rank the clips of a feature file against one text query
    Query(QueryArgs),
    /// Train and evaluate every (alpha, beta) pair of two grids
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub transcript: Option<PathArg>,
    #[arg(long)]
    pub out: Option<PathArg>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathArg>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_labels: Option<usize>,
    #[arg(long)]
    pub d_img: Option<usize>,
    #[arg(long)]
    pub d_txt: Option<usize>,
    #[arg(long)]
    pub text_signal: Option<f64>,
    #[arg(long)]
    pub image_signal: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: Option<PathArg>,
    /// Share of each label moved to the held-out file
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_out: Option<PathArg>,
    #[arg(long)]
    pub test_out: Option<PathArg>,
}

/// Training hyperparameters shared by `train` and `sweep`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Discriminator step scale
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Learning rate for both players
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Generator steps per mini-batch
    #[arg(long)]
    pub k_inner: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Common-space dimension
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Width of hidden layers
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Width of the fused video feature
    #[arg(long)]
    pub fused_dim: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionVariant>,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<AblationMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hard cap on outer iterations
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Relative L_emb change that counts as a plateau; 0 disables the check
    #[arg(long)]
    pub plateau_tol: Option<f64>,
    /// Outer iterations the plateau check looks back
    #[arg(long)]
    pub plateau_window: Option<usize>,
}

fn parse_fusion(s: &str) -> Result<FusionVariant, String> {
    s.parse().map_err(|e: ffacr_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: ffacr_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathArg>,
    /// Model file to write
    #[arg(long)]
    pub out: Option<PathArg>,
    /// Per-iteration loss CSV to write
    #[arg(long)]
    pub history: Option<PathArg>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathArg>,
    #[arg(long)]
    pub data: Option<PathArg>,
    /// Cutoffs, comma-separated
    #[arg(long)]
    pub map_at: Option<List<usize>>,
    /// PR curve CSV to write
    #[arg(long)]
    pub pr_out: Option<PathArg>,
    /// MAP CSV to write in addition to standard output
    #[arg(long)]
    pub map_out: Option<PathArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ResultFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown format {other:?} (expected csv or jsonl)")),
        }
    }
}

impl fmt::Display for ResultFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        })
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub model: Option<PathArg>,
    /// Feature file whose clips form the index
    #[arg(long)]
    pub index_data: Option<PathArg>,
    /// Text file holding one query text-feature vector, comma or whitespace separated
    #[arg(long)]
    pub query_features: Option<PathArg>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub format: Option<ResultFormat>,
}

/// `map@K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Metric(pub usize);

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.strip_prefix("map@")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(Metric)
            .ok_or_else(|| format!("unknown metric {s:?} (expected map@K)"))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "map@{}", self.0)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathArg>,
    #[arg(long)]
    pub alpha_grid: Option<List<f64>>,
    #[arg(long)]
    pub beta_grid: Option<List<f64>>,
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Grid CSV to write
    #[arg(long)]
    pub out: Option<PathArg>,
    /// Share of each label held out for scoring the cells
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Cells trained concurrently
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

/// Resolves the shared training flags into a [`TrainConfig`]. `alpha` and `beta` are
/// skipped when `with_weights` is false (the sweep sets them per cell).
pub fn resolve_train(r: &mut Resolver, f: &TrainFlags, with_weights: bool) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let (alpha, beta) = if with_weights {
        (r.value("alpha", f.alpha, d.alpha)?, r.value("beta", f.beta, d.beta)?)
    } else {
        (d.alpha, d.beta)
    };
    let default_plateau = d.convergence.plateau.expect("default has a plateau");
    let max_outer = r.value("max-outer", f.max_outer, d.convergence.max_outer)?;
    let plateau_tol = r.value("plateau-tol", f.plateau_tol, default_plateau.rel_tol)?;
    let plateau_window = r.value("plateau-window", f.plateau_window, default_plateau.window)?;
    let cfg = TrainConfig {
        alpha,
        beta,
        lambda: r.value("lambda", f.lambda, d.lambda)?,
        mu: r.value("lr", f.lr, d.mu)?,
        k_inner: r.value("k-inner", f.k_inner, d.k_inner)?,
        batch_size: r.value("batch", f.batch, d.batch_size)?,
        epochs: r.value("epochs", f.epochs, d.epochs)?,
        seed: r.value("seed", f.seed, d.seed)?,
        variant: r.value("fusion", f.fusion, d.variant)?,
        m: r.value("embed-dim", f.embed_dim, d.m)?,
        fused_dim: r.value("fused-dim", f.fused_dim, d.fused_dim)?,
        hidden_width: r.value("hidden", f.hidden, d.hidden_width)?,
        ablation: r.value("ablation", f.ablation, d.ablation)?,
        convergence: Convergence {
            max_outer,
            plateau: (plateau_tol > 0.0).then_some(Plateau { rel_tol: plateau_tol, window: plateau_window }),
        },
        freeze_generator: false,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Output streams of one invocation.
pub struct Io<'a> {
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

fn echo(io: &mut Io, command: &str, resolved: &str) -> Result<()> {
    write!(io.stderr, "# ffacr {command}\n{resolved}")?;
    Ok(())
}

pub fn run(cli: Cli, io: &mut Io) -> Result<()> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    let mut r = Resolver::new(file);
    match &cli.command {
        Command::Segment(a) => cmd_segment(a, &mut r, io),
        Command::Synth(a) => cmd_synth(a, &mut r, io),
        Command::Split(a) => cmd_split(a, &mut r, io),
        Command::Train(a) => cmd_train(a, &mut r, io),
        Command::Eval(a) => cmd_eval(a, &mut r, io),
        Command::Query(a) => cmd_query(a, &mut r, io),
        Command::Sweep(a) => cmd_sweep(a, &mut r, io),
    }
}

pub fn cmd_segment(a: &SegmentArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let transcript = r.required("transcript", a.transcript.clone())?;
    let out = r.required("out", a.out.clone())?;
    let resolved = r.finish()?;
    echo(io, "segment", &resolved)?;

    let events = read_transcript(&transcript.0)?;
    if events.is_empty() {
        writeln!(io.stderr, "warning: transcript {} holds no events", transcript)?;
    }
    let seg = segment_transcript(&events)?;
    if seg.skipped_empty > 0 {
        writeln!(io.stderr, "warning: skipped {} ASR events with empty text", seg.skipped_empty)?;
    }
    if seg.skipped_zero_length > 0 {
        writeln!(io.stderr, "warning: skipped {} zero-length ASR events", seg.skipped_zero_length)?;
    }
    write_manifest(&out.0, &seg.clips)?;
    writeln!(io.stderr, "wrote {} clips to {}", seg.clips.len(), out)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let d = SynthConfig::default();
    let out = r.required("out", a.out.clone())?;
    let cfg = SynthConfig {
        n_samples: r.value("n-samples", a.n_samples, d.n_samples)?,
        n_labels: r.value("n-labels", a.n_labels, d.n_labels)?,
        d_img: r.value("d-img", a.d_img, d.d_img)?,
        d_txt: r.value("d-txt", a.d_txt, d.d_txt)?,
        text_signal: r.value("text-signal", a.text_signal, d.text_signal)?,
        image_signal: r.value("image-signal", a.image_signal, d.image_signal)?,
        noise: r.value("noise", a.noise, d.noise)?,
        seed: r.value("seed", a.seed, d.seed)?,
    };
    let resolved = r.finish()?;
    echo(io, "synth", &resolved)?;
    let ds = synth_generate(&cfg)?;
    ds.write(&out.0)?;
    writeln!(io.stderr, "wrote {} samples to {}", ds.len(), out)?;
    Ok(())
}

pub fn cmd_split(a: &SplitArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let data = r.required("data", a.data.clone())?;
    let fraction = r.value("fraction", a.fraction, 0.2)?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let train_out = r.required("train-out", a.train_out.clone())?;
    let test_out = r.required("test-out", a.test_out.clone())?;
    let resolved = r.finish()?;
    echo(io, "split", &resolved)?;
    let ds = Dataset::read(&data.0)?;
    let (train_set, test_set) = ds.split_holdout(fraction, seed)?;
    train_set.write(&train_out.0)?;
    test_set.write(&test_out.0)?;
    writeln!(io.stderr, "train {} samples, held out {}", train_set.len(), test_set.len())?;
    Ok(())
}

fn describe_failure(e: &TrainError) -> String {
    match e.history.last() {
        Some(h) => format!(
            "{}; last finite losses at iteration {}: l_imd={} l_imi={} l_emb={} l_adv={}",
            e.error, h.iteration, h.l_imd, h.l_imi, h.l_emb, h.l_adv
        ),
        None => format!("{}; no iteration completed", e.error),
    }
}

pub fn cmd_train(a: &TrainArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let data = r.required("data", a.data.clone())?;
    let out = r.required("out", a.out.clone())?;
    let history_path = r.optional("history", a.history.clone())?;
    let cfg = resolve_train(r, &a.train, true)?;
    let resolved = r.finish()?;
    echo(io, "train", &resolved)?;

    let ds = Dataset::read(&data.0)?;
    let outcome = match train(&ds, &cfg) {
        Ok(o) => o,
        Err(e) => {
            let message = describe_failure(&e);
            if let Some(p) = &history_path {
                e.history.save_csv(&p.0)?;
            }
            return Err(anyhow::Error::new(e).context(message));
        }
    };
    outcome.model.save(&out.0)?;
    if let Some(p) = &history_path {
        outcome.history.save_csv(&p.0)?;
    }
    if let Some(h) = outcome.history.last() {
        writeln!(
            io.stderr,
            "trained {} outer iterations: l_emb={:.6} l_adv={:.6} disc_acc={:.3}",
            outcome.history.len(),
            h.l_emb,
            h.l_adv,
            h.disc_acc
        )?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let model_path = r.required("model", a.model.clone())?;
    let data = r.required("data", a.data.clone())?;
    let ks = r.value("map-at", a.map_at.clone(), List(vec![5, 10, 30]))?;
    let pr_out = r.optional("pr-out", a.pr_out.clone())?;
    let map_out = r.optional("map-out", a.map_out.clone())?;
    let resolved = r.finish()?;
    echo(io, "eval", &resolved)?;
    if ks.0.contains(&0) {
        return Err(UsageError("map-at cutoffs must be at least 1".into()).into());
    }

    let model = FfacrModel::load(&model_path.0)?;
    let ds = Dataset::read(&data.0)?;
    let report = evaluate_retrieval(&model, &ds, &ks.0)?;
    report.write_map_csv(&mut *io.stdout)?;
    for &k in &ks.0 {
        writeln!(io.stderr, "random-ranking baseline map@{k}={}", random_baseline_map(&ds, k)?)?;
    }
    if report.skipped_queries > 0 {
        writeln!(io.stderr, "warning: {} queries without relevant clips left out of the PR curve", report.skipped_queries)?;
    }
    if let Some(p) = pr_out {
        report.write_pr_csv(create(&p.0)?)?;
    }
    if let Some(p) = map_out {
        report.write_map_csv(create(&p.0)?)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| ffacr_core::Error::Io { path: path.into(), source: e })?;
    Ok(std::io::BufWriter::new(f))
}

/// Parses one feature vector written as numbers separated by commas or whitespace.
pub fn parse_query_vector(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| UsageError(format!("query features: {t:?} is not a finite number")).into())
        })
        .collect()
}

pub fn cmd_query(a: &QueryArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let model_path = r.required("model", a.model.clone())?;
    let index_data = r.required("index-data", a.index_data.clone())?;
    let query_path = r.required("query-features", a.query_features.clone())?;
    let k = r.value("top-k", a.top_k, 10usize)?;
    let format = r.value("format", a.format, ResultFormat::Csv)?;
    let resolved = r.finish()?;
    echo(io, "query", &resolved)?;

    let model = FfacrModel::load(&model_path.0)?;
    let ds = Dataset::read(&index_data.0)?;
    let text = std::fs::read_to_string(&query_path.0)
        .map_err(|e| ffacr_core::Error::Io { path: query_path.0.clone(), source: e })?;
    let query = parse_query_vector(&text)?;
    let index = build_index(&model, &ds)?;
    let results = search(&index, &model, &query, k)?;
    match format {
        ResultFormat::Csv => write_results_csv(&results, &mut *io.stdout)?,
        ResultFormat::Jsonl => write_results_jsonl(&results, &mut *io.stdout)?,
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
}

/// Trains one model per `(alpha, beta)` pair, every cell from the same seed, and
/// scores each on `held_out`. Cells come back in grid order (alpha major).
pub fn run_sweep(
    train_set: &Dataset,
    held_out: &Dataset,
    base: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    metric: Metric,
    jobs: usize,
) -> Result<Vec<SweepCell>> {
    let grid: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    pool.install(|| {
        grid.par_iter()
            .map(|&(alpha, beta)| -> Result<SweepCell> {
                let cfg = TrainConfig { alpha, beta, ..base.clone() };
                let outcome = train(train_set, &cfg).map_err(|e| {
                    let message = format!("cell alpha={alpha} beta={beta}: {}", describe_failure(&e));
                    anyhow::Error::new(e).context(message)
                })?;
                let report = evaluate_retrieval(&outcome.model, held_out, &[metric.0])?;
                Ok(SweepCell { alpha, beta, score: report.map(metric.0).expect("requested cutoff") })
            })
            .collect()
    })
}

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], metric: Metric, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["alpha".to_string(), "beta".to_string(), metric.to_string()])?;
    for c in cells {
        w.write_record([c.alpha.to_string(), c.beta.to_string(), c.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs, r: &mut Resolver, io: &mut Io) -> Result<()> {
    let data = r.required("data", a.data.clone())?;
    let grid = List(vec![0.1, 1.0, 10.0, 100.0]);
    let alphas = r.value("alpha-grid", a.alpha_grid.clone(), grid.clone())?;
    let betas = r.value("beta-grid", a.beta_grid.clone(), grid)?;
    let metric = r.value("metric", a.metric, Metric(30))?;
    let out = r.required("out", a.out.clone())?;
    let holdout = r.value("holdout", a.holdout, 0.2)?;
    let split_seed = r.value("split-seed", a.split_seed, 0u64)?;
    let jobs = r.value("jobs", a.jobs, 1usize)?;
    let base = resolve_train(r, &a.train, false)?;
    let resolved = r.finish()?;
    echo(io, "sweep", &resolved)?;
    if alphas.0.iter().chain(&betas.0).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(UsageError("grid weights must be non-negative numbers".into()).into());
    }

    let ds = Dataset::read(&data.0)?;
    let (train_set, held_out) = ds.split_holdout(holdout, split_seed)?;
    if held_out.is_empty() {
        return Err(UsageError("hold-out split is empty; raise --holdout".into()).into());
    }
    let cells = run_sweep(&train_set, &held_out, &base, &alphas.0, &betas.0, metric, jobs)?;
    write_sweep_csv(&cells, metric, create(&out.0)?)?;
    writeln!(io.stderr, "wrote {} cells to {}", cells.len(), out)?;
    Ok(())
}
