//! `revrec`: command-line driver for the review-driven recommendation
//! pipeline.
//!
//! Each subcommand runs one pipeline stage against a TOML run
//! configuration. Stages verify their upstream artifacts (manifest
//! presence, config digest, content hashes) before doing any work, so
//! the subcommands can be re-run in any order and will refuse stale or
//! missing inputs with an actionable message.
//!
//! Exit codes: 0 on success, 1 when the stage completed but some
//! records or pairs failed (their errors are in the stage's failure
//! log), 2 for configuration or sequencing errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use revrec_core::config::RunConfig;
use revrec_core::pipeline::{
    self, stage_dependencies, stage_outputs, EvalTask, StageReport,
};
use revrec_core::Error;

#[derive(Parser)]
#[command(
    name = "revrec",
    version,
    about = "Review-driven rating prediction and top-k reranking pipeline",
    propagate_version = true
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "revrec.toml")]
    config: PathBuf,

    /// Validate the configuration and print the execution plan without
    /// touching the filesystem.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the configured worker-thread count.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read, validate, and k-core filter the review corpus.
    Ingest,
    /// Split the corpus chronologically into train/valid/test.
    Split,
    /// Extract per-review preference lists with the language model.
    Extract,
    /// Summarize extracted preferences into user and item profiles.
    Profile {
        /// Item-profile selection strategy: all, helpful:N, or
        /// neighbor:K (overrides the config).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Export the instruction dataset (inputs, targets, loss masks).
    #[command(name = "distill-export")]
    DistillExport {
        /// Steps to export, comma-separated: pe (preference
        /// extraction), pc (profile construction), rp (rating
        /// prediction).
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<String>>,
    },
    /// Score every test interaction with the reasoning predictor.
    Predict,
    /// Build the balanced top-k testbed, generate candidates, and
    /// rerank them with the predictor.
    Rerank,
    /// Compute metrics for the rating and/or top-k tasks.
    Evaluate {
        /// Task to evaluate; omit to run both.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Top-k cutoffs, comma-separated (e.g. 5,10,15,20).
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Aggregate stage manifests and metrics into a run report.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Rating,
    Topk,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Split => "split",
            Command::Extract => "extract",
            Command::Profile { .. } => "profile",
            Command::DistillExport { .. } => "distill",
            Command::Predict => "predict",
            Command::Rerank => "rerank",
            Command::Evaluate { .. } => "evaluate",
            Command::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    ExitCode::from(run(cli))
}

fn run(cli: Cli) -> u8 {
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    if let Some(workers) = cli.workers {
        cfg.run.workers = workers;
    }
    if let Command::Profile {
        strategy: Some(strategy),
    } = &cli.command
    {
        cfg.profiles.item_strategy = strategy.clone();
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 2;
    }

    if cli.dry_run {
        return match print_plan(&cli, &cfg) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        };
    }

    let outcome = dispatch(&cli.command, &cfg);
    match outcome {
        Ok(report) => {
            for note in &report.notes {
                println!("{}: {}", report.stage, note);
            }
            if report.failures > 0 {
                eprintln!(
                    "{}: {} item(s) failed; see the stage's failure log under {}",
                    report.stage,
                    report.failures,
                    cfg.run.out_dir.join(report.stage).display()
                );
                1
            } else {
                println!("{}: ok", report.stage);
                0
            }
        }
        Err(e @ (Error::Config(_) | Error::Pipeline(_) | Error::UnknownFormat(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<StageReport, Error> {
    match command {
        Command::Ingest => pipeline::run_ingest(cfg),
        Command::Split => pipeline::run_split(cfg),
        Command::Extract => pipeline::run_extract(cfg),
        Command::Profile { .. } => pipeline::run_profile(cfg),
        Command::DistillExport { steps } => pipeline::run_distill(cfg, steps.as_deref()),
        Command::Predict => pipeline::run_predict(cfg),
        Command::Rerank => pipeline::run_rerank(cfg),
        Command::Evaluate { task, k } => {
            let task = match task {
                Some(TaskArg::Rating) => EvalTask::Rating,
                Some(TaskArg::Topk) => EvalTask::Topk,
                None => EvalTask::Both,
            };
            pipeline::run_evaluate(cfg, task, k.as_deref())
        }
        Command::Report => pipeline::run_report(cfg),
    }
}

fn print_plan(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    let stage = cli.command.stage();
    let digest = cfg.digest()?;
    println!("plan: {stage}");
    println!("  config: {} (digest {})", cli.config.display(), &digest[..12]);
    println!("  output root: {}", cfg.run.out_dir.display());
    let deps = stage_dependencies(stage);
    if deps.is_empty() {
        println!("  requires: nothing");
    } else {
        println!("  requires verified manifests: {}", deps.join(", "));
    }
    for rel in stage_outputs(stage) {
        println!("  would write: {rel}");
    }
    println!("  dry run: no files were read beyond the config, none were written");
    Ok(())
}
