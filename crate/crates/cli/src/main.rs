use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emodur::corpus::{self, Corpus, GeneratorConfig};
use emodur::eval::{self, EvalReport};
use emodur::predictor::{DurationModel, ReverseMode, Variant};
use emodur::train::{self, TrainConfig};
use emodur::ArousalLabel;
use serde_json::json;

#[derive(Parser)]
#[command(name = "emodur", version, about = "Arousal-conditioned unit duration modeling")]
struct Cli {
    /// Print machine-readable JSON instead of a table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    Generate(GenerateArgs),
    /// Train a duration predictor on a corpus.
    Train(TrainArgs),
    /// Re-time every record of a corpus for a target arousal.
    Convert(ConvertArgs),
    /// Convert a corpus to arousal levels 1..7 and report durations.
    Evaluate(EvaluateArgs),
    /// Render a saved evaluation report.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// GeneratorConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_utterances: Option<usize>,
    #[arg(long)]
    vocabulary: Option<usize>,
    #[arg(long)]
    units_per_utt: Option<usize>,
    #[arg(long)]
    arousal_slope: Option<f64>,
    #[arg(long)]
    lognormal_sigma: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[arg(long)]
    n_speakers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// TrainConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    target_arousal: f64,
    /// Converted corpus output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "corrected")]
    mode: ReverseMode,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "corrected")]
    mode: ReverseMode,
    /// Seed recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write arousal_level,mean_seconds,std_seconds rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by `evaluate --out`.
    report: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_model(path: &Path) -> Result<DurationModel> {
    DurationModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn generate(args: GenerateArgs, as_json: bool) -> Result<()> {
    let mut cfg: GeneratorConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    set!(seed, n_utterances, vocabulary, units_per_utt, arousal_slope, lognormal_sigma, outlier_rate, n_speakers);
    let corpus = corpus::generate(&cfg)?;
    corpus.save(&args.out)?;
    let planted = corpus
        .header
        .generator
        .as_ref()
        .map(|p| p.planted_contrast(&corpus))
        .unwrap_or_default();
    if as_json {
        print_json(&json!({
            "out": args.out,
            "records": corpus.len(),
            "planted_delta_1_7": planted,
            "config": cfg,
        }))
    } else {
        println!(
            "wrote {} records to {} (planted delta_1_7 {planted:.4} s)",
            corpus.len(),
            args.out.display()
        );
        Ok(())
    }
}

fn run_train(args: TrainArgs, as_json: bool) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    set!(variant, epochs, batch_size, learning_rate, seed, patience, val_fraction);
    if let Some(v) = args.hidden {
        cfg.model.hidden = v;
    }
    if let Some(v) = args.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = args.kernel_size {
        cfg.model.kernel_size = v;
    }
    let corpus = load_corpus(&args.corpus)?;
    if args.config.is_none() {
        cfg.model.vocabulary = corpus.vocabulary();
    }
    let out = train::train(&corpus, &cfg)?;
    out.model.save(&args.out)?;
    if let Some(log) = &args.log {
        out.log.write_jsonl(log)?;
    }
    if as_json {
        print_json(&json!({
            "out": args.out,
            "variant": cfg.variant,
            "best_epoch": out.log.best_epoch,
            "best_val": out.log.best_val,
            "epochs_run": out.log.epochs_run,
            "reverse_calls": out.log.reverse_calls,
        }))
    } else {
        println!(
            "trained {} for {} epochs; best val {:.5} at epoch {}; saved {}",
            cfg.variant,
            out.log.epochs_run,
            out.log.best_val,
            out.log.best_epoch,
            args.out.display()
        );
        Ok(())
    }
}

fn convert(args: ConvertArgs, as_json: bool) -> Result<()> {
    let target = ArousalLabel::new(args.target_arousal)?;
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    let mut records = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    for r in corpus.records() {
        let (seq, row) = eval::convert_durations(&model, r, corpus.speaker_vector(r)?, target, args.mode)?;
        let mut converted = r.clone();
        converted.units = seq.ids;
        converted.arousal = target;
        records.push(converted);
        rows.push(row);
    }
    let mut header = corpus.header.clone();
    header.generator = None;
    Corpus::new(header, records)?.save(&args.out)?;
    let n = rows.len().max(1) as f64;
    let source = rows.iter().map(|r| r.source_seconds).sum::<f64>() / n;
    let output = rows.iter().map(|r| r.output_seconds).sum::<f64>() / n;
    if as_json {
        print_json(&json!({
            "out": args.out,
            "target_arousal": target.value(),
            "mean_source_seconds": source,
            "mean_output_seconds": output,
            "rows": rows,
        }))
    } else {
        println!(
            "converted {} records to arousal {}: mean {source:.4} s -> {output:.4} s",
            rows.len(),
            target.value()
        );
        Ok(())
    }
}

fn show(report: &EvalReport, csv: Option<&Path>, as_json: bool) -> Result<()> {
    if let Some(path) = csv {
        fs::write(path, report.to_csv())?;
    }
    if as_json {
        print_json(report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}

fn run_evaluate(args: EvaluateArgs, as_json: bool) -> Result<()> {
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    let report = eval::evaluate(&model, &corpus, args.mode, args.seed)?;
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    show(&report, args.csv.as_deref(), as_json)
}

fn run_report(args: ReportArgs, as_json: bool) -> Result<()> {
    let report: EvalReport = read_json(&args.report)?;
    if report.bins.len() != eval::AROUSAL_LEVELS.len() {
        bail!("report has {} arousal bins, expected 7", report.bins.len());
    }
    show(&report, args.csv.as_deref(), as_json)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a, cli.json),
        Command::Train(a) => run_train(a, cli.json),
        Command::Convert(a) => convert(a, cli.json),
        Command::Evaluate(a) => run_evaluate(a, cli.json),
        Command::Report(a) => run_report(a, cli.json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
