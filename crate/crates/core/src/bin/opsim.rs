use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opsim::runner::{cmd_diagnose, cmd_run, cmd_sweep, cmd_tune};

/// Online push-sum learning simulator.
#[derive(Parser)]
#[command(name = "opsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm and seed listed in a config.
    Run {
        config: PathBuf,
        /// Write outputs here instead of the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Repeat the run for each value of one sweep axis.
    Sweep {
        config: PathBuf,
        /// network_size, density or stochastic_fraction.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print backward-product concentration against the lemma bounds.
    Diagnose {
        /// Matrix or adjacency file, or an inline `n=..,bound=..,seed=..` topology.
        spec: String,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
    },
    /// Grid-search the step size on a short horizon, then run the winners.
    Tune {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match Cli::parse().command {
        Command::Run { config, output_dir } => cmd_run(&config, output_dir.as_deref()),
        Command::Sweep { config, axis, output_dir } => cmd_sweep(&config, &axis, output_dir.as_deref()),
        Command::Diagnose { spec, horizon } => cmd_diagnose(&spec, horizon),
        Command::Tune { config, output_dir } => cmd_tune(&config, output_dir.as_deref()),
    };
    ExitCode::from(code as u8)
}
