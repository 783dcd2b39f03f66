//! Command line front end for the decoding pipeline.
//!
//! Every stage command takes the same JSON configuration and runs the
//! pipeline from the start up to and including that stage, so `decode` on a
//! fresh directory also generates data, tunes, and embeds first. Reruns with
//! an unchanged configuration reproduce each artifact byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurodec::eval::{aggregate_scores, AggregateLevel};
use neurodec::pipeline::{
    render_report, run_pipeline_until, validate_config, PipelineError, PipelineStage, RunReport,
    RUN_REPORT_FILE,
};

#[derive(Parser)]
#[command(
    name = "neurodec",
    version,
    about = "Sentence decoding experiments on voxel data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the dataset, then stop.
    Synth(StageArgs),
    /// Run through model tuning.
    Tune(StageArgs),
    /// Run through sentence embedding extraction.
    Embed(StageArgs),
    /// Run through ridge decoding.
    Decode(StageArgs),
    /// Run through matching evaluation and significance tests.
    Eval(StageArgs),
    /// Run through representational similarity analysis.
    Rsa(StageArgs),
    /// Run the full pipeline including report rendering.
    Run(StageArgs),
    /// Re-render the report from an existing run directory.
    Report {
        /// Run directory holding run_report.json.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured worker count (0 uses all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => run_stage(&args, PipelineStage::Data),
        Command::Tune(args) => run_stage(&args, PipelineStage::Tuning),
        Command::Embed(args) => run_stage(&args, PipelineStage::Embedding),
        Command::Decode(args) => run_stage(&args, PipelineStage::Decoding),
        Command::Eval(args) => run_stage(&args, PipelineStage::Evaluation),
        Command::Rsa(args) => run_stage(&args, PipelineStage::Rsa),
        Command::Run(args) => run_stage(&args, PipelineStage::Render),
        Command::Report { dir } => rerender(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_stage(args: &StageArgs, last: PipelineStage) -> Result<(), PipelineError> {
    let mut config = validate_config(&args.config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    let report = run_pipeline_until(&config, last)?;
    print_summary(&report, &config.output_dir);
    Ok(())
}

fn rerender(dir: &Path) -> Result<(), PipelineError> {
    let text = std::fs::read_to_string(dir.join(RUN_REPORT_FILE))?;
    let report: RunReport = serde_json::from_str(&text)
        .map_err(|e| PipelineError::ParseError(format!("{}: {e}", RUN_REPORT_FILE)))?;
    render_report(&report, &dir.join("report"))?;
    println!("wrote {}", dir.join("report").join("report.md").display());
    Ok(())
}

fn print_summary(report: &RunReport, out: &Path) {
    if let Ok(means) = aggregate_scores(&report.scores, AggregateLevel::SubjectMean) {
        for e in &means.entries {
            println!(
                "{}: accuracy {:.4}, mse {:.4} over {} jobs",
                e.embedding_name, e.accuracy, e.mse, e.count
            );
        }
    }
    for s in &report.significance {
        println!(
            "{}: finetune - prefix t = {:.3}, adjusted p = {:.4}{}",
            s.task,
            s.result.t_statistic,
            s.result.p_adjusted,
            if s.result.significant {
                " (significant)"
            } else {
                ""
            }
        );
    }
    for s in &report.skipped {
        println!("skipped: {s}");
    }
    println!("wrote {}", out.join(RUN_REPORT_FILE).display());
}
