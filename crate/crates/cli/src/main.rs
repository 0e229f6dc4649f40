//! Command-line front end of the pose estimation pipeline.
//!
//! Exit codes: 0 on success, 2 on configuration or input-consistency errors,
//! 3 on unreadable or unwritable files, 4 on pipeline failures.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchpose::Error;

use commands::{EstimateArgs, EvaluateArgs, ExportArgs, OnboardArgs, VisualizeArgs};

#[derive(Debug, Parser)]
#[command(
    name = "patchpose",
    version,
    about = "Template-based 6D object pose estimation"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render templates of a mesh and write its representation archive.
    Onboard(OnboardArgs),
    /// Estimate the pose of an onboarded object in one masked image.
    Estimate(EstimateArgs),
    /// Score results against ground truth with VSD, MSSD and MSPD average recall.
    Evaluate(EvaluateArgs),
    /// Draw the silhouette contour of an estimated pose over an image.
    Visualize(VisualizeArgs),
    /// Write the template renderings used by onboarding, for external feature extractors.
    ExportTemplates(ExportArgs),
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_io() {
        3
    } else {
        4
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    let outcome = match &cli.command {
        Command::Onboard(a) => commands::onboard(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Visualize(a) => commands::visualize(a),
        Command::ExportTemplates(a) => commands::export_templates(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
