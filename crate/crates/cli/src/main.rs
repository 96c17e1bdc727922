use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchem_cli::commands;
use patchem_cli::config::PipelineConfig;
use patchem_cli::error::{CliError, CliResult};

/// Weakly-supervised classification of large tiled images: EM-based
/// discriminative patch selection with two-level decision fusion.
#[derive(Parser)]
#[command(name = "patchem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (strict-schema JSON).
    #[arg(long)]
    config: PathBuf,
    /// Cap the worker thread count; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Image to render.
    #[arg(long = "image-id")]
    image_id: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the dataset directory.
    Synth(CommonArgs),
    /// Run EM training and fusion fitting on the grouped train split.
    Train(CommonArgs),
    /// Evaluate the persisted models on the held-out split.
    Eval(CommonArgs),
    /// Export smoothed-probability and selection-mask heatmaps for an image.
    Heatmap(HeatmapArgs),
    /// Run the full method-comparison grid and write one table.
    Matrix(CommonArgs),
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::config("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    let (common, image_id) = match &cli.command {
        Command::Synth(c) | Command::Train(c) | Command::Eval(c) | Command::Matrix(c) => (c, None),
        Command::Heatmap(h) => (&h.common, Some(h.image_id.clone())),
    };
    configure_threads(common.threads)?;
    let config = PipelineConfig::load(&common.config)?;
    match &cli.command {
        Command::Synth(_) => commands::cmd_synth(&config),
        Command::Train(_) => commands::cmd_train(&config),
        Command::Eval(_) => commands::cmd_eval(&config),
        Command::Heatmap(_) => {
            commands::cmd_heatmap(&config, image_id.as_deref().expect("clap enforces image-id"))
        }
        Command::Matrix(_) => commands::cmd_matrix(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
