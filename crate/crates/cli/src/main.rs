use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swarmsim_cli::{commands, CliError, Format, RunConfig};

/// Multi-robot relative-pose, formation and network simulation.
#[derive(Debug, Parser)]
#[command(name = "swarmsim", version)]
struct Cli {
    /// TOML configuration file; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Format of summary outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Closed-loop leader/follower formation run.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric report over edge records, a dataset or a run log.
    Metrics {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample observation groups from a generated floor.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Network-only stress run.
    Netbench {
        #[arg(long)]
        out: PathBuf,
    },
    /// Record a path as keyframes, then replay it.
    Homing {
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot-ready position columns from a run log.
    Traces {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    Defaults,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.cmd {
        Cmd::Simulate { out } => commands::simulate(&cfg, &out, cli.format),
        Cmd::Metrics { input, out } => commands::metrics(&cfg, &input, &out, cli.format),
        Cmd::Datagen { out } => commands::datagen(&cfg, &out),
        Cmd::Netbench { out } => commands::netbench(&cfg, &out, cli.format).map(|_| ()),
        Cmd::Homing { out } => commands::homing(&cfg, &out, cli.format).map(|_| ()),
        Cmd::Traces { input, out } => commands::traces(&input, &out),
        Cmd::Defaults => {
            print!("{}", commands::defaults());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let level = std::env::var("COVIS_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
