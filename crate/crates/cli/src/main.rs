//! `dnae`: data generation, training, prediction and Monte-Carlo sampling
//! for the ignition surrogate.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dnae", version, about = "Latent neural-ODE surrogate for laser ignition trials")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Base seed; every random stream of the command derives from it.
    #[arg(long, global = true, default_value_t = 2024)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// error, warn, info, debug or trace; DNAE_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ignition ensemble.
    GenData(commands::GenData),
    /// Train the autoencoder on a dataset.
    TrainAe(commands::TrainAe),
    /// Encode every trial of a dataset into latent trajectories.
    Encode(commands::Encode),
    /// Curriculum-train the latent ODE, then calibrate the classifier and fit the RBF.
    TrainNode(commands::TrainNode),
    /// Predict one trajectory for a given input vector.
    Predict(commands::Predict),
    /// Classify encoded or predicted trials.
    Classify(commands::Classify),
    /// Run a Monte-Carlo campaign and build probability maps.
    Sample(commands::Sample),
    /// Aggregate error tables, confusion matrices and rankings.
    Report(commands::Report),
}

fn init_logging(level: &str) {
    let mut b = env_logger::Builder::new();
    b.parse_filters(level);
    if let Ok(spec) = std::env::var("DNAE_LOG") {
        b.parse_filters(&spec);
    }
    b.format_target(false).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global.log_level);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    let g = &cli.global;
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(g, a),
        Command::TrainAe(a) => commands::train_ae(g, a),
        Command::Encode(a) => commands::encode(g, a),
        Command::TrainNode(a) => commands::train_node(g, a),
        Command::Predict(a) => commands::predict(g, a),
        Command::Classify(a) => commands::classify(g, a),
        Command::Sample(a) => commands::sample(g, a),
        Command::Report(a) => commands::report(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
