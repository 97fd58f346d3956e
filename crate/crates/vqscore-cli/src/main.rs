//! Command line front end. Subcommands cover the whole experiment loop:
//! corpus synthesis, training, scoring, and evaluation. Every run is
//! reproducible from its flags; file outputs are byte-identical across
//! repeats with the same seed.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vqscore_core::corpus::{load_corpus, save_corpus, QualityGrade};
use vqscore_core::metrics::BRANCH_NAMES;
use vqscore_core::model::{BranchMask, ModelConfig};
use vqscore_core::score::{branch_report, score_corpus};
use vqscore_core::synth::{generate_corpus, SynthConfig};
use vqscore_core::train::{load_checkpoint, save_checkpoint, train, TrainConfig};

#[derive(Parser)]
#[command(name = "vqscore", version, about = "Multi-branch video quality scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graded corpus with planted quality defects.
    Synth(SynthArgs),
    /// Train a model on a graded corpus; writes a checkpoint and history.
    Train(TrainArgs),
    /// Score a corpus with a trained checkpoint; writes JSON lines.
    Score(ScoreArgs),
    /// Print ranking metrics of a checkpoint on a graded corpus as JSON.
    Eval(ReportArgs),
    /// Print per-grade branch diagnostics as a text table.
    InspectBranches(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file of generator settings; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of records.
    #[arg(long)]
    n: Option<usize>,
    /// Text embedding width.
    #[arg(long)]
    d_t: Option<usize>,
    /// Frame embedding width.
    #[arg(long)]
    d_f: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    m: Option<usize>,
    /// Seed for all generator randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus output path (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Graded corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file {"model": {...}, "train": {...}}; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// History output path; default is <out-checkpoint>.history.json.
    #[arg(long)]
    out_history: Option<PathBuf>,
    /// Seed for all training randomness.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Fraction of the corpus held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Remove one branch from the model (repeatable).
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BRANCH_NAMES))]
    disable_branch: Vec<String>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Corpus to score (grades optional).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scored output path (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Graded corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Optional model settings from the train config file. Embedding widths
/// default to the corpus dimensions when absent.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelOverrides {
    d_t: Option<usize>,
    d_f: Option<usize>,
    d: Option<usize>,
    n_heads: Option<usize>,
    max_len: Option<usize>,
    branches: Option<BranchMask>,
    normalize_dots: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    model: ModelOverrides,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// A downstream reader (such as `head`) closing stdout is not a failure.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause
            .downcast_ref::<io::Error>()
            .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Score(args) => run_score(args),
        Command::Eval(args) => run_eval(args),
        Command::InspectBranches(args) => run_inspect(args),
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut config: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = args.n {
        config.n_records = n;
    }
    if let Some(d_t) = args.d_t {
        config.d_t = d_t;
    }
    if let Some(d_f) = args.d_f {
        config.d_f = d_f;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (records, _) = generate_corpus(&config)?;
    save_corpus(&records, &args.out)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let records = load_corpus(&args.corpus, true)
        .with_context(|| format!("loading {}", args.corpus.display()))?;
    let first = records.first().context("corpus is empty")?;
    let (corpus_d_t, corpus_d_f) = first.dims();

    let file: TrainFile = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainFile::default(),
    };
    let mut model_config = ModelConfig::new(
        file.model.d_t.unwrap_or(corpus_d_t),
        file.model.d_f.unwrap_or(corpus_d_f),
    );
    if let Some(d) = file.model.d {
        model_config.d = d;
    }
    if let Some(n_heads) = file.model.n_heads {
        model_config.n_heads = n_heads;
    }
    if let Some(max_len) = file.model.max_len {
        model_config.max_len = max_len;
    }
    if let Some(branches) = file.model.branches {
        model_config.branches = branches;
    }
    if let Some(normalize) = file.model.normalize_dots {
        model_config.normalize_dots = normalize;
    }
    for name in &args.disable_branch {
        match name.as_str() {
            "video_text_match" => model_config.branches.video_text = false,
            "frame_coherence" => model_config.branches.frame_coherence = false,
            "frame_quality" => model_config.branches.frame_quality = false,
            "text_quality" => model_config.branches.text_quality = false,
            other => bail!("unknown branch '{other}'"),
        }
    }

    let mut train_config = file.train;
    if let Some(seed) = args.seed {
        train_config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        train_config.epochs = epochs;
    }
    if let Some(lr) = args.learning_rate {
        train_config.learning_rate = lr;
    }
    if let Some(batch) = args.batch_size {
        train_config.batch_size = batch;
    }
    if let Some(dropout) = args.dropout {
        train_config.dropout = dropout;
    }
    if let Some(fraction) = args.val_fraction {
        train_config.val_fraction = fraction;
    }

    let out = train(&records, &model_config, &train_config)?;
    if out.pairwise_degenerate {
        eprintln!("warning: training split carries a single grade; pairwise loss is inactive");
    }
    save_checkpoint(&out.params, &out.state, &args.out_checkpoint)?;
    let history_path = args
        .out_history
        .unwrap_or_else(|| default_history_path(&args.out_checkpoint));
    let mut history = serde_json::to_string_pretty(&out.history)?;
    history.push('\n');
    fs::write(&history_path, history)
        .with_context(|| format!("writing {}", history_path.display()))?;

    if let Some(last) = out.history.last() {
        let auc = last
            .val_auc
            .map_or("n/a".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {}: train loss {:.6}, validation auc {}",
            last.epoch, last.train_loss, auc
        );
    }
    eprintln!(
        "wrote checkpoint {} and history {}",
        args.out_checkpoint.display(),
        history_path.display()
    );
    Ok(())
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let records = load_corpus(&args.corpus, false)
        .with_context(|| format!("loading {}", args.corpus.display()))?;
    let (params, _) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let scored = score_corpus(&records, &params)?;
    let mut lines = String::new();
    for item in &scored {
        lines.push_str(&serde_json::to_string(item)?);
        lines.push('\n');
    }
    fs::write(&args.out, lines).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("scored {} records into {}", scored.len(), args.out.display());
    Ok(())
}

fn run_eval(args: ReportArgs) -> Result<()> {
    let report = load_and_report(&args)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn run_inspect(args: ReportArgs) -> Result<()> {
    let report = load_and_report(&args)?;
    let grades: Vec<&str> = QualityGrade::ALL.iter().map(|g| g.name()).collect();
    let mut out = io::stdout().lock();

    writeln!(out, "mean branch logit by grade, with per-branch ranking quality")?;
    write!(out, "{:<18}", "branch")?;
    for grade in &grades {
        write!(out, " {grade:>10}")?;
    }
    writeln!(out, " {:>10}", "logit_pnr")?;
    for name in BRANCH_NAMES {
        write!(out, "{name:<18}")?;
        for grade in &grades {
            let cell = report
                .branch_mean_logits
                .get(*grade)
                .and_then(|row| row.get(name))
                .map_or("-".to_string(), |v| format!("{v:.4}"));
            write!(out, " {cell:>10}")?;
        }
        let pnr = report
            .branch_pnr
            .get(name)
            .map_or("-".to_string(), |p| format!("{:.3}", p.as_f64()));
        writeln!(out, " {pnr:>10}")?;
    }
    write!(
        out,
        "\noverall: pnr={:.3} auc={:.4}",
        report.pnr.as_f64(),
        report.auc
    )?;
    for (n, value) in &report.dcg {
        write!(out, " dcg@{n}={value:.4}")?;
    }
    writeln!(out)?;
    Ok(())
}

fn load_and_report(args: &ReportArgs) -> Result<vqscore_core::metrics::RankingReport> {
    let records = load_corpus(&args.corpus, true)
        .with_context(|| format!("loading {}", args.corpus.display()))?;
    let (params, _) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    Ok(branch_report(&records, &params)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn default_history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".history.json");
    checkpoint.with_file_name(name)
}
