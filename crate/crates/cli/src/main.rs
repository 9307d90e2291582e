mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{PipelineConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "deocc", version, about = "Model-guided face de-occlusion and shape refinement")]
struct Cli {
    /// Key-value config file (defaults to $DEOCC_CONFIG when set).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic morphable model (and optionally the sprite library).
    GenModel(commands::GenModelArgs),
    /// Fit model coefficients and pose to 68 landmarks.
    Fit(commands::FitArgs),
    /// Render the model from a fit file.
    Render(commands::RenderArgs),
    /// Build a paired occlusion dataset.
    BuildDataset(commands::BuildDatasetArgs),
    /// Train the de-occlusion networks.
    Train(commands::TrainArgs),
    /// Remove occlusions from a face image.
    Deocclude(commands::DeoccludeArgs),
    /// Recover lighting, albedo and refined depth by shape from shading.
    Refine(commands::RefineArgs),
    /// Score a checkpoint on the test split of a dataset.
    Evaluate(commands::EvaluateArgs),
    /// De-occlude with replaced expression coefficients.
    Edit(commands::EditArgs),
}

/// Where the model parameters of an input photograph come from.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct FitInput {
    /// 68-point landmark file; the model is fitted to it.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Previously written fit result.
    #[arg(long)]
    fit: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenModel(a) => commands::gen_model(cfg, a),
        Command::Fit(a) => commands::fit(cfg, a),
        Command::Render(a) => commands::render(cfg, a),
        Command::BuildDataset(a) => commands::build_dataset(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Deocclude(a) => commands::deocclude(cfg, a),
        Command::Refine(a) => commands::refine(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Edit(a) => commands::edit(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
