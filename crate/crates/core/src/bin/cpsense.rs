use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use cpsense::cli::{run_experiment, ExperimentConfig, PosteriorTarget, RunOptions, ScoringMode};
use cpsense::predictor::IntervalKind;

#[derive(Parser)]
#[command(
    name = "cpsense",
    version,
    about = "Changepoint-aware spectrum prediction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write metrics.csv plus optional traces.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Override the number of replications.
        #[arg(long)]
        seeds: Option<u64>,
        /// Dump one detector's posterior: SUB_BAND busy|idle.
        #[arg(long, num_args = 2, value_names = ["SUB_BAND", "KIND"])]
        dump_posterior: Option<Vec<String>>,
        #[arg(long, value_enum)]
        score_window: Option<WindowArg>,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Full,
    PostSei,
}

fn parse_target(args: &[String]) -> anyhow::Result<PosteriorTarget> {
    let sub_band = args[0]
        .parse()
        .with_context(|| format!("invalid sub-band index {:?}", args[0]))?;
    let kind = match args[1].as_str() {
        "busy" => IntervalKind::Busy,
        "idle" => IntervalKind::Idle,
        other => anyhow::bail!("expected busy or idle, got {other:?}"),
    };
    Ok(PosteriorTarget { sub_band, kind })
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let Command::Run {
        config,
        out_dir,
        seeds,
        dump_posterior,
        score_window,
        quiet,
    } = Cli::parse().command;
    let experiment = ExperimentConfig::load(&config)?;
    let options = RunOptions {
        out_dir,
        seeds,
        score_window: score_window.map(|w| match w {
            WindowArg::Full => ScoringMode::Full,
            WindowArg::PostSei => ScoringMode::PostSei,
        }),
        dump_posterior: dump_posterior.as_deref().map(parse_target).transpose()?,
        quiet,
    };
    run_experiment(&experiment, &options)?;
    Ok(())
}
