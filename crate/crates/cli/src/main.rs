//! Experiment runner: batch generation, training, evaluation, and the
//! certification suites, over native finite MDPs.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brpo", about = "Batch residual policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate batch data from a behavior policy at a target quality.
    Gen(commands::GenArgs),
    /// Train a policy from a batch file.
    Train(commands::TrainArgs),
    /// Evaluate a policy exactly or by rollouts.
    Eval(commands::EvalArgs),
    /// Run a certification suite on random instances.
    Verify(commands::VerifyArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(args) => commands::cmd_gen(args).map(|()| 0),
        Command::Train(args) => commands::cmd_train(args).map(|()| 0),
        Command::Eval(args) => commands::cmd_eval(args).map(|()| 0),
        Command::Verify(args) => commands::cmd_verify(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
