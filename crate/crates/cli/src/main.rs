//! Command-line driver for seeded bandit experiments and verification suites.
//!
//! Exit codes: 0 = success, 1 = suite or replication failure, 2 = usage or
//! configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kernel_bandits::experiment::{
    self, build_environment, load_config, ExperimentConfig, InstanceSummary,
};

#[derive(Parser)]
#[command(
    name = "kernel-bandits",
    version,
    about = "Seeded experiments for kernelized bandits with exponential-family rewards"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the TOML configuration file.
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of worker threads for replications (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured bandit experiment and write CSV/JSON artifacts.
    RunExperiment(Common),
    /// Run the configured verification suites and write a pass/fail report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Test-only negative control: multiply every verified bound by this
        /// factor (values below 1 must make the coverage suites fail).
        #[arg(long, default_value_t = 1.0, hide = true)]
        corrupt_bound_factor: f64,
    },
    /// Print the instance summary (x*, kappas, per-arm values) as JSON.
    PrintInstance(Common),
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = Some(workers);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            // Configuration and input problems are usage errors.
            if err
                .downcast_ref::<kernel_bandits::Error>()
                .map(|e| matches!(e, kernel_bandits::Error::Input(_)))
                .unwrap_or(false)
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::RunExperiment(common) => {
            let cfg = load(&common)?;
            let dir = out_dir(&cfg);
            let summary = experiment::run_experiment(&cfg, &dir)?;
            println!(
                "wrote {} run files and {} under {}",
                summary.run_csvs.len(),
                summary.aggregate_csv.file_name().unwrap().to_string_lossy(),
                summary.out_dir.display()
            );
            if summary.failed > 0 {
                eprintln!(
                    "{} replication(s) failed; see manifest.json",
                    summary.failed
                );
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            common,
            corrupt_bound_factor,
        } => {
            let cfg = load(&common)?;
            let dir = out_dir(&cfg);
            let report = experiment::verify(&cfg, &dir, corrupt_bound_factor)?;
            for suite in &report.suites {
                println!(
                    "[{}] {} (margin {:+.3e})",
                    if suite.passed { "PASS" } else { "FAIL" },
                    suite.suite,
                    suite.margin
                );
            }
            if report.all_passed {
                println!("all suites passed; report at {}/report.json", dir.display());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("suite failure; report at {}/report.json", dir.display());
                Ok(ExitCode::from(1))
            }
        }
        Command::PrintInstance(common) => {
            let cfg = load(&common)?;
            // The instance does not depend on horizon/delta except through the
            // Gaussian noise bound; use the run section when present.
            let (horizon, delta) = cfg
                .run
                .as_ref()
                .map(|r| (r.horizon, r.delta))
                .or_else(|| cfg.verify.as_ref().map(|v| (v.horizon, v.delta)))
                .unwrap_or((1000, 0.1));
            let env = build_environment(&cfg, horizon, delta)?;
            let summary = InstanceSummary::from_environment(&env);
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(out) = &cfg.output_dir {
                std::fs::create_dir_all(out)?;
                std::fs::write(
                    out.join("instance.json"),
                    serde_json::to_string_pretty(&summary)?,
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
