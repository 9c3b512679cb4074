use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedfd::harness::{self, compare, ExperimentConfig, RunReport};
use fedfd::model::load_checkpoint;
use fedfd::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "fedfd", version, about = "Federated feature diversification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set federation.rounds=5
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print reports side by side with deltas against the first.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Show a checkpoint's metadata and arrays.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

fn execute(command: Command) -> fedfd::Result<()> {
    match command {
        Command::Run { config, overrides, out } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            log::info!("config {} -> {}", cfg.hash(), dir.display());
            let output = harness::run(&cfg)?;
            harness::write_outputs(&output, &dir)?;
            let r = &output.report;
            for (mode, s) in &r.summary {
                println!("{mode:<20} {}", s.display());
            }
            println!("report: {}", dir.join("report.json").display());
        }
        Command::Compare { reports } => {
            let loaded = reports
                .iter()
                .map(|p| Ok((p.display().to_string(), RunReport::load(p)?)))
                .collect::<fedfd::Result<Vec<_>>>()?;
            print!("{}", compare(&loaded)?.render());
        }
        Command::Inspect { checkpoint } => {
            let (bundle, meta) = load_checkpoint(&checkpoint)?;
            for (k, v) in &meta {
                println!("{k}: {v}");
            }
            let total: usize = bundle.values().map(|a| a.data.len()).sum();
            println!("{} arrays, {total} values", bundle.len());
            for (k, a) in &bundle {
                let norm = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("  {k:<28} {:<14} l2 {norm:.6}", format!("{:?}", a.shape));
            }
        }
    }
    Ok(())
}
