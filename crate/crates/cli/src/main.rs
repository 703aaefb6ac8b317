use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowfield_cli::{cmd_eval, cmd_fit, cmd_simulate, CliError, EvalArgs, FitArgs, SimulateArgs};

/// Sequential inference of recurring vector-field patterns in frame data.
#[derive(Debug, Parser)]
#[command(name = "flowfield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic frame file and its ground truth.
    Simulate(SimulateArgs),
    /// Fit the model to a frame file and export assignments, transitions and fields.
    Fit(FitArgs),
    /// Score a fit against simulator ground truth.
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWFIELD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result: Result<(), CliError> = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args).map(|_| ()),
        Command::Fit(args) => cmd_fit(args).map(|m| println!("k_found {} total_loglik {:.6}", m.k_found, m.total_loglik)),
        Command::Eval(args) => cmd_eval(args).map(|r| println!("ari {:.6} k_found {} k_true {}", r.ari, r.k_found, r.k_true)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
