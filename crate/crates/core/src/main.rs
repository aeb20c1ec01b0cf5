use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dendsnn::config::{Experiment, ExperimentConfig};
use dendsnn::{experiment, Error};

#[derive(Parser)]
#[command(version, about = "Dendritic spiking network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training with per-epoch test accuracy.
    Train(Args),
    /// Task-incremental learning on pixel-permuted tasks.
    Continual(Args),
    /// Accuracy under additive Gaussian noise.
    NoiseEval(Args),
    /// Accuracy under FGSM attacks.
    AdvEval(Args),
    /// Neuron simulation timing.
    Bench(Args),
}

#[derive(clap::Args)]
struct Args {
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, args) = match cli.command {
        Command::Train(a) => (Experiment::Supervised, a),
        Command::Continual(a) => (Experiment::Continual, a),
        Command::NoiseEval(a) => (Experiment::NoiseEval, a),
        Command::AdvEval(a) => (Experiment::AdvEval, a),
        Command::Bench(a) => (Experiment::Bench, a),
    };
    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(dir) = args.output_dir {
            cfg.output_dir = Some(dir);
        }
        experiment::run(exp, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("{}: {e}", args.config.display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
