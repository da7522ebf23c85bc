use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drf_cli::commands::{self, BaselineArgs, EvalArgs, GradcheckArgs, MulticastArgs, SweepArgs, TrainArgs};

/// Deep SNR-robust feedback codes: training, evaluation and sweeps.
#[derive(Parser)]
#[command(name = "drf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a code; writes train.csv and checkpoints.
    Train(TrainArgs),
    /// BER/BLER of a checkpoint over an SNR grid.
    Eval(EvalArgs),
    /// BLER under SNR mismatch between the channel and the attention input.
    Sweep(SweepArgs),
    /// Per-user error rates of a two-receiver code over a correlation grid.
    Multicast(MulticastArgs),
    /// Finite-difference check of every gradient of a fresh model.
    Gradcheck(GradcheckArgs),
    /// Uncoded antipodal signalling over AWGN.
    Baseline(BaselineArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Multicast(a) => commands::multicast(a),
        Command::Gradcheck(a) => commands::gradcheck(a).map(|(p, _)| p),
        Command::Baseline(a) => commands::baseline(a),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
