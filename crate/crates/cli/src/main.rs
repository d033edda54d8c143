use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use cafegan::evaluation::Variant;
use cafegan_cli::commands::{self, EvalMode, Globals, TrainArgs};
use cafegan_cli::model::Model;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cafegan", version, about = "Face attribute editing with complementary attention features")]
struct Cli {
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Ablation {
    Full,
    #[value(name = "no_CM")]
    NoCm,
    #[value(name = "no_CAB")]
    NoCab,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Accuracy,
    Fid,
    Ablation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from --config.
    Train {
        /// Ablation variant; overrides the config flags.
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from --checkpoint.
        #[arg(long)]
        resume: bool,
        /// Skip training the evaluation classifier.
        #[arg(long)]
        no_classifier: bool,
    },
    /// Edit an image or a directory of images.
    Edit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Target attributes, `Name=0|1[,Name=0|1...]`.
        #[arg(long, default_value = "")]
        set: String,
        /// Source bits `0,1,...`; estimated by the bundled classifier when omitted.
        #[arg(long)]
        source: Option<String>,
    },
    /// Write AF and CAFE heatmaps.
    Visualize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated subset of attributes.
        #[arg(long)]
        attributes: Option<String>,
    },
    /// Accuracy, FID or ablation reports.
    Evaluate {
        #[arg(long, value_enum, default_value = "accuracy")]
        mode: Mode,
        /// Images per attribute.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "reports")]
        output: PathBuf,
    },
    /// Serve the checkpoint over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Write a synthetic image folder with annotations.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = Globals { seed: cli.seed, config: cli.config, checkpoint: cli.checkpoint };
    match cli.command {
        Command::Train { ablation, epochs, output, resume, no_classifier } => {
            let ablation = ablation.map(|a| match a {
                Ablation::Full => Variant::Full,
                Ablation::NoCm => Variant::NoCm,
                Ablation::NoCab => Variant::NoCab,
            });
            commands::cmd_train(&g, TrainArgs { ablation, epochs, output, resume, no_classifier })
        }
        Command::Edit { input, output, set, source } => {
            commands::cmd_edit(&g, &input, &output, &set, source.as_deref())
        }
        Command::Visualize { input, output, attributes } => {
            commands::cmd_visualize(&g, &input, &output, attributes.as_deref())
        }
        Command::Evaluate { mode, n, output } => {
            let mode = match mode {
                Mode::Accuracy => EvalMode::Accuracy,
                Mode::Fid => EvalMode::Fid,
                Mode::Ablation => EvalMode::Ablation,
            };
            commands::cmd_evaluate(&g, mode, n, &output)
        }
        Command::Serve { bind } => {
            let path = g.checkpoint.clone().ok_or_else(|| anyhow::anyhow!("--checkpoint is required for serve"))?;
            let model = Arc::new(Model::load(&path)?);
            tokio::runtime::Runtime::new()?.block_on(cafegan_cli::service::serve(model, &bind))
        }
        Command::Synth { output, n } => commands::cmd_synth(&g, &output, n),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
