//! Command-line front end of the simulator.
//!
//! Exit codes: 0 success, 1 validation error, 2 run failure, 3 failed
//! verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmm::config::{ExperimentConfig, Overrides, RunMode};
use fedmm::experiment::{gen_data, run_experiment};
use fedmm::tasks::TaskKind;
use fedmm::{verify, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "fedmm", version, about = "Federated multimodal graph learning with missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Client worker threads; never changes results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// reliability, fedavg or fedavg-zero.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// nc, lp or mr.
    #[arg(long, global = true)]
    task: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic graph to <out>/graph.json.
    GenData(#[command(flatten)] Common),
    /// Run a federation and write metrics.csv, rounds.jsonl, summary.json.
    Run(#[command(flatten)] Common),
    /// Finite-difference check of the full local objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Sampled entries per check.
        #[arg(long, default_value_t = 200)]
        sample: usize,
    },
    /// Monte Carlo check of the fusion error bound.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        configs: usize,
        #[arg(long, default_value_t = 10000)]
        trials: usize,
    },
    /// Compare the evaluation metrics with brute-force references.
    MetricsOracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        workers: common.workers,
        mode: common.mode.as_deref().map(str::parse::<RunMode>).transpose()?,
        task: common.task.as_deref().map(str::parse::<TaskKind>).transpose()?,
    };
    cfg.apply(&overrides)?;
    Ok(cfg)
}

fn validation_or_run(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::GraphFile(_) => EXIT_VALIDATION,
        _ => EXIT_RUN,
    }
}

/// Prints the report and saves it under `out` when given.
fn emit<T: serde::Serialize>(report: &T, out: Option<&Path>, file: &str) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    println!("{json}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(file), json + "\n")?;
    }
    Ok(())
}

fn verdict(passed: bool, what: &str) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("{what} failed");
        ExitCode::from(EXIT_VERIFY)
    }
}

fn run(cli: Cli) -> Result<ExitCode, (u8, Error)> {
    let fail = |e: Error| (validation_or_run(&e), e);
    let checked = |e: Error| match e {
        Error::InvalidArgument(_) => (EXIT_VALIDATION, e),
        _ => (EXIT_VERIFY, e),
    };
    let common = match &cli.command {
        Command::GenData(c) | Command::Run(c) => c,
        Command::Gradcheck { common, .. } | Command::TheoryCheck { common, .. } | Command::MetricsOracle { common, .. } => common,
    };
    let cfg = load(common).map_err(|e| (EXIT_VALIDATION, e))?;
    let out = common.out.as_deref();
    match cli.command {
        Command::GenData(_) => {
            let path = out.unwrap_or(Path::new("out")).join("graph.json");
            gen_data(&cfg, &path).map_err(fail)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(_) => {
            let (summary, artifacts) = run_experiment(&cfg).map_err(fail)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            eprintln!("wrote {}", artifacts.metrics.parent().unwrap_or(Path::new(".")).display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seeds, sample, .. } => {
            let report = verify::gradcheck_suite(seeds, sample).map_err(checked)?;
            emit(&report, out, "gradcheck.json").map_err(fail)?;
            Ok(verdict(report.passed, "gradient check"))
        }
        Command::TheoryCheck { configs, trials, .. } => {
            let report = verify::theory_check(configs, trials, cfg.seed).map_err(checked)?;
            emit(&report, out, "theory-check.json").map_err(fail)?;
            Ok(verdict(report.passed, "bound check"))
        }
        Command::MetricsOracle { instances, .. } => {
            let report = verify::oracle_check(instances, cfg.seed);
            emit(&report, out, "metrics-oracle.json").map_err(fail)?;
            Ok(verdict(report.passed, "metrics oracle"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
