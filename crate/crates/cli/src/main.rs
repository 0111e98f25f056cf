//! `affectflow` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use affectflow::affectmodel::SolveMode;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "affectflow", version, about = "Continuous affective trajectories from conversational corpora")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus CSV for `build`, dataset file for the other commands.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Resampled points per knot interval.
    #[arg(long, global = true)]
    pub factor: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Integrator for inference: fixed or adaptive.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<SolveMode>,
    /// Annotation endpoint base URL (switches annotation to the endpoint).
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Softmax temperature applied to endpoint logits.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
}

fn parse_mode(s: &str) -> Result<SolveMode, String> {
    s.parse().map_err(|e: affectflow::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus to dataset, segment table, statistics and removal report.
    Build {
        /// Precomputed annotations (e0..e5 CSV).
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Fit the dynamics model to the dataset.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Predict emotions over one segment.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        segment: usize,
    },
    /// Write steering vectors for every dataset row.
    ExportSteering {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Six rows of anchor embeddings (CSV, no header).
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        lambda_base: Option<f64>,
        /// Only this segment.
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Per-emotion (hour angle, value, delta) tables for density plots.
    Plotdata {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Summary statistics of a dataset.
    Stats,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<affectflow::Error>()) {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = config::PipelineConfig::resolve(&cli.global).and_then(|cfg| {
        let input = cli.global.input.as_deref();
        match cli.command {
            Command::Build { annotations } => commands::build(&cfg, input, annotations),
            Command::Train { resume, max_steps } => commands::train(&cfg, input, resume, max_steps),
            Command::Infer { checkpoint, segment } => commands::infer(&cfg, input, checkpoint, segment),
            Command::ExportSteering {
                checkpoint,
                anchors,
                lambda_base,
                segment,
            } => commands::export_steering(&cfg, input, checkpoint, anchors, lambda_base, segment),
            Command::Plotdata { samples } => commands::plotdata(&cfg, input, samples),
            Command::Stats => commands::stats(&cfg, input),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
