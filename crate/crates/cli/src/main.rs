//! `gega`: train, distill, run and score document-level relation extraction
//! models from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::Settings;
use gega::pipeline::TrainPhase;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad setting or missing input; the message names the field or path.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Gega(#[from] gega::Error),
}

#[derive(Debug, Parser)]
#[command(name = "gega", version, about = "Evidence-guided document-level relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Train a teacher on annotated documents with gold evidence.
    TrainTeacher(RunArgs),
    /// Annotate a distantly supervised corpus with teacher token importances.
    InferSilver(RunArgs),
    /// Train a student on distant data, distilling silver annotations.
    TrainStudent(RunArgs),
    /// Continue a student on annotated documents.
    Finetune(RunArgs),
    /// Predict relations and evidence (`--eval-mode single|fusion`).
    Infer(RunArgs),
    /// Score a result file against a gold corpus.
    Eval(RunArgs),
    /// Write a synthetic corpus in DocRED JSON format.
    Synth(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML or JSON settings, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Validate settings and inputs, print the resolved settings, and stop.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    InferSilver,
    TrainStudent,
    Finetune,
    Infer,
    Eval,
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::InferSilver => "infer-silver",
            Command::TrainStudent => "train-student",
            Command::Finetune => "finetune",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Synth => "synth",
        }
    }

    pub fn phase(self) -> Option<TrainPhase> {
        match self {
            Command::TrainTeacher => Some(TrainPhase::Teacher),
            Command::TrainStudent => Some(TrainPhase::StudentDistill),
            Command::Finetune => Some(TrainPhase::StudentFinetune),
            _ => None,
        }
    }
}

impl Sub {
    fn split(self) -> (Command, RunArgs) {
        match self {
            Sub::TrainTeacher(a) => (Command::TrainTeacher, a),
            Sub::InferSilver(a) => (Command::InferSilver, a),
            Sub::TrainStudent(a) => (Command::TrainStudent, a),
            Sub::Finetune(a) => (Command::Finetune, a),
            Sub::Infer(a) => (Command::Infer, a),
            Sub::Eval(a) => (Command::Eval, a),
            Sub::Synth(a) => (Command::Synth, a),
        }
    }
}

fn resolve(command: Command, args: &RunArgs) -> Result<Settings, CliError> {
    let mut settings = Settings::defaults(command);
    if let Some(path) = &args.config {
        manifest::check_inputs(path);
        settings = settings.overlay(Settings::load(path)?);
    }
    Ok(settings.overlay(args.settings.clone()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (command, args) = cli.command.split();
    let settings = resolve(command, &args)?;
    commands::validate(command, &settings)?;
    if args.dry_run {
        commands::check_inputs(command, &settings)?;
        let text = serde_json::to_string_pretty(&settings).map_err(|e| CliError::Config(e.to_string()))?;
        println!("{text}");
        return Ok(());
    }
    commands::execute(command, &settings)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors exit with status 2 inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
