//! `w8a8`: calibrate, smooth, quantize and evaluate a toy transformer.

mod commands;
mod config;
mod error;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Stage;
use crate::config::{Level, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "w8a8", version, about = "Post-training W8A8 quantization with activation smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// FP, O1, O2 or O3.
    #[arg(long, global = true)]
    level: Option<Level>,
    /// Migration strength in [0, 1].
    #[arg(long, global = true)]
    alpha: Option<f32>,
    /// Alpha grid as start:stop:step.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Fraction of largest tokens dropped per calibration sample.
    #[arg(long, global = true)]
    clip: Option<f32>,
    /// Seed for the calibration and evaluation inputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the path this command writes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    report: Format,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Collect activation statistics and static steps.
    Calibrate,
    /// Turn calibration statistics into smoothing factors.
    Smooth,
    /// Fuse the factors and quantize the weights.
    Quantize,
    /// Compare the quantized model with the float model.
    Eval,
    /// Grid-search the migration strength.
    SearchAlpha,
    /// Error table for baselines, levels and granularities.
    Compare,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Text,
    Json,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let stage = match cli.command {
        Command::Calibrate => Stage::Calibrate,
        Command::Smooth => Stage::Smooth,
        Command::Quantize => Stage::Quantize,
        Command::Eval => Stage::Eval,
        Command::SearchAlpha => Stage::SearchAlpha,
        Command::Compare => Stage::Compare,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        level: cli.level,
        alpha: cli.alpha,
        grid: cli.grid.clone(),
        clip: cli.clip,
        seed: cli.seed,
    });
    let (report, path) = commands::run(stage, &cfg, cli.out.as_deref())?;
    let text = match cli.report {
        Format::Text => report.to_text(),
        Format::Json => report.to_json(),
    };
    if let Some(p) = path {
        w8a8::io::write_atomic(&p, text.as_bytes()).map_err(CliError::at(&p))?;
    }
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("w8a8: {e}");
            e.into()
        }
    }
}
