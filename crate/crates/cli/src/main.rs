//! `ragbench`: benchmark-construction pipeline stages and evaluation as
//! subcommands over one TOML config.
//!
//! Every stage writes its artifacts into the config's output directory and
//! records a receipt; re-running a completed stage is a no-op unless
//! `--force`. Running a stage before its inputs exist exits 2 and names the
//! missing artifact and the stage that produces it. Config problems exit 3;
//! anything that fails mid-stage exits 1. Errors go to stderr as a single
//! JSON line so wrapping scripts can parse them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ragbench_core::config::PipelineConfig;
use ragbench_core::pipeline::{artifacts, Pipeline, StageOutcome};
use ragbench_core::StageError;

#[derive(Parser)]
#[command(
    name = "ragbench",
    version,
    about = "Build and evaluate multi-modal RAG retrieval benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus manifest and stamp page images with their
    /// document titles.
    Ingest(StageArgs),
    /// Generate candidate queries for every page.
    Generate(StageArgs),
    /// Filter candidates through the realism verifier.
    Verify(StageArgs),
    /// Expand accepted queries into rephrasing levels 1–3.
    Rephrase(StageArgs),
    /// Judge every query against every page and classify evidence types.
    Label(LabelArgs),
    /// Assemble and validate the benchmark bundle.
    Build(StageArgs),
    /// Emit the training triplets from the bundle.
    Triplets(StageArgs),
    /// Rephrase a seeded fraction of the training triplets.
    Augment(StageArgs),
    /// Score the bundle with the configured retrievers and write reports.
    Evaluate(EvaluateArgs),
    /// Render the metric table from existing run files.
    Report(ReportArgs),
    /// Print per-collection corpus statistics.
    Stats(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Re-run even when the stage receipt is current.
    #[arg(long)]
    force: bool,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LabelArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Sweep only the top-K lexical-prescreen pages per query (plus the
    /// query's source page) instead of the full corpus.
    #[arg(long)]
    prescreen_k: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Rephrasing level to evaluate (repeatable; default 0–3).
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    level: Vec<u8>,
    /// Retriever to evaluate (repeatable; default from the config).
    #[arg(long, value_parser = ["bm25", "dense", "maxsim"])]
    retriever: Vec<String>,
    /// Candidate-list depth per query.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Restrict the table to one rephrasing level.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    level: Option<u8>,
    /// Restrict the table to one retriever.
    #[arg(long, value_parser = ["bm25", "dense", "maxsim"])]
    retriever: Option<String>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            let line = serde_json::json!({ "code": code, "error": err.to_string() });
            eprintln!("{line}");
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> Result<(), StageError> {
    match command {
        Command::Ingest(args) => stage("ingest", args, |p, f| p.run_ingest(f)),
        Command::Generate(args) => stage("generate", args, |p, f| p.run_generate(f)),
        Command::Verify(args) => stage("verify", args, |p, f| p.run_verify(f)),
        Command::Rephrase(args) => stage("rephrase", args, |p, f| p.run_rephrase(f)),
        Command::Label(args) => {
            let mut config = load_config(&args.stage.config.config, args.stage.seed)?;
            if let Some(k) = args.prescreen_k {
                config.labeling.prescreen = true;
                config.labeling.prescreen_k = k;
            }
            let pipeline = Pipeline::new(config)?;
            report_outcome("label", pipeline.run_label(args.stage.force)?);
            Ok(())
        }
        Command::Build(args) => stage("build", args, |p, f| p.run_build(f)),
        Command::Triplets(args) => stage("triplets", args, |p, f| p.run_triplets(f)),
        Command::Augment(args) => stage("augment", args, |p, f| p.run_augment(f)),
        Command::Evaluate(args) => {
            let config = load_config(&args.stage.config.config, args.stage.seed)?;
            let pipeline = Pipeline::new(config)?;
            let mut scope = pipeline.default_scope();
            if !args.level.is_empty() {
                let mut levels = args.level;
                levels.sort_unstable();
                levels.dedup();
                scope.levels = levels;
            }
            if !args.retriever.is_empty() {
                let mut retrievers = args.retriever;
                retrievers.sort_unstable();
                retrievers.dedup();
                scope.retrievers = retrievers;
            }
            if let Some(k) = args.k {
                scope.k = k;
            }
            let outcome = pipeline.run_evaluate(args.stage.force, &scope)?;
            report_outcome("evaluate", outcome);
            if outcome == StageOutcome::Completed {
                let table = pipeline
                    .artifact(artifacts::REPORTS_DIR)
                    .join(artifacts::METRICS_TABLE);
                if let Ok(rendered) = std::fs::read_to_string(table) {
                    print!("{rendered}");
                }
            }
            Ok(())
        }
        Command::Report(args) => {
            let pipeline = Pipeline::new(load_config(&args.config.config, None)?)?;
            let table = pipeline.render_report(args.level, args.retriever.as_deref())?;
            print!("{table}");
            Ok(())
        }
        Command::Stats(args) => {
            let pipeline = Pipeline::new(load_config(&args.config, None)?)?;
            print!("{}", pipeline.render_stats()?);
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig, StageError> {
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn stage(
    name: &str,
    args: StageArgs,
    run: impl FnOnce(&Pipeline, bool) -> Result<StageOutcome, StageError>,
) -> Result<(), StageError> {
    let pipeline = Pipeline::new(load_config(&args.config.config, args.seed)?)?;
    report_outcome(name, run(&pipeline, args.force)?);
    Ok(())
}

fn report_outcome(name: &str, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Completed => println!("{name}: completed"),
        StageOutcome::Skipped => {
            println!("{name}: up to date (receipt current; --force re-runs)");
        }
    }
}
