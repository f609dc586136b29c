//! Command-line runner for the synthetic metric-SLAM experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metric_slam::experiment::{self, ExperimentConfig, OUTPUT_DIR_ENV};
use metric_slam::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "metric-slam", version, about = "Metric-scale monocular SLAM experiments on synthetic scenes")]
#[command(after_help = concat!(
    "Exit codes: 0 success, 1 other error, 2 config error, 3 initialization failure, ",
    "4 tracking lost, 5 solver failure.\n",
    "Set METRIC_SLAM_OUTPUT_DIR to override the configured output_dir."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate, track, close loops, evaluate and write all artifacts.
    Run {
        config: PathBuf,
        /// Extra components to disable, comma separated
        /// (no_ray_factor, no_dsug, no_kalman, no_wls).
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
    },
    /// Report the cost slope and curvature along the global scale direction.
    Observability { config: PathBuf },
    /// Run the configured system and a variant with components disabled.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        disable: Vec<String>,
    },
}

fn load(path: &Path, extra_ablation: &[String]) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    config.ablation.extend(extra_ablation.iter().map(|s| s.trim().to_string()));
    config.validate()?;
    Ok(config)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, ablation } => {
            let config = load(&config, &ablation)?;
            let (outcome, dir) = experiment::run(&config)?;
            print!("{}", outcome.summary_table());
            println!("artifacts written to {}", dir.display());
        }
        Command::Observability { config } => {
            let config = load(&config, &[])?;
            let report = experiment::observability_report(&config)?;
            let dir = config.resolved_output_dir();
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("observability.txt"), &report.text)?;
            print!("{}", report.text);
        }
        Command::Ablate { config, disable } => {
            let config = load(&config, &[])?;
            let outcome = experiment::ablate(&config, &disable)?;
            print!("{}", outcome.table);
            println!("artifacts written to {}", config.resolved_output_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Io(_)) {
                eprintln!("hint: check output_dir or {OUTPUT_DIR_ENV}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
