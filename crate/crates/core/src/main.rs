use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poisonlab::cli;

/// Federated-learning poisoning laboratory.
#[derive(Parser)]
#[command(name = "poisonlab", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to a timestamped directory under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `fl.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one scenario per value of a numeric key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of malicious_fraction, sigma_v, mu_v, E, t_hat.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast property suite.
    Selftest,
}

fn main() -> ExitCode {
    let code = match Args::parse().command {
        Command::Run { config, out, seed } => cli::cmd_run(&config, out.as_deref(), seed),
        Command::Sweep { config, axis, values, out } => cli::cmd_sweep(&config, &axis, &values, out.as_deref()),
        Command::Selftest => cli::cmd_selftest(),
    };
    ExitCode::from(code as u8)
}
