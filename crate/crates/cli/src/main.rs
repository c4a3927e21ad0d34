use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rayleigh_cli::{config::ExperimentConfig, run};
use rayleigh_core::Error;

/// Kinetic-theory laboratory experiment runner.
#[derive(Parser, Debug)]
#[command(name = "rayleigh", version)]
struct Cli {
    /// TOML experiment configuration; omitted = built-in lln recipe.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Experiment name (overrides the config).
    #[arg(long)]
    experiment: Option<String>,

    /// Ensemble size (overrides the config).
    #[arg(long)]
    members: Option<usize>,

    /// Monte Carlo sample count (overrides the config).
    #[arg(long)]
    samples: Option<usize>,

    /// Exit nonzero when the experiment verdict fails.
    #[arg(long)]
    strict: bool,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_CAP: u8 = 3;
const EXIT_VERDICT: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", path.display());
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            match ExperimentConfig::from_toml(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(EXIT_VALIDATION);
                }
            }
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    if let Some(exp) = &cli.experiment {
        cfg.experiment = exp.clone();
    }
    if let Some(m) = cli.members {
        cfg.members = m;
    }
    if let Some(n) = cli.samples {
        cfg.samples = n;
    }

    let offenses = cfg.validate();
    if !offenses.is_empty() {
        eprintln!("invalid config ({} problems):", offenses.len());
        for o in &offenses {
            eprintln!("  {o}");
        }
        return ExitCode::from(EXIT_VALIDATION);
    }

    match run(&cfg) {
        Ok(outcome) => {
            println!("manifest: {}", outcome.manifest_path.display());
            if cli.strict && !outcome.verdict {
                eprintln!("verdict failed in strict mode");
                return ExitCode::from(EXIT_VERDICT);
            }
            ExitCode::SUCCESS
        }
        Err(Error::CapViolation { module, what }) => {
            eprintln!("cap violation in module {module}: {what}");
            ExitCode::from(EXIT_CAP)
        }
        Err(Error::InvalidParams(msg)) => {
            eprintln!("invalid parameters: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("experiment failed: {e}");
            ExitCode::FAILURE
        }
    }
}
