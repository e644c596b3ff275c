//! `fedsim`: generate and check experiment configs, run simulations, and
//! compare gated against ungated runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fedsim::gate::account_costs;
use fedsim::sim::report::REPORT_FILE;
use fedsim::sim::{run_experiment_with, ConfigError, ExperimentConfig, ExperimentReport, Scenario, SimError};

const DEFAULT_CONFIG: &str = "fedsim.json";
const SAVINGS_FILE: &str = "savings.json";

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Hierarchical federated learning fleet simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default experiment config.
    Init {
        #[arg(long, default_value = DEFAULT_CONFIG)]
        config: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long, default_value = DEFAULT_CONFIG)]
        config: PathBuf,
    },
    /// Run an experiment and write metrics.csv, report.json and timing.json.
    Run(RunArgs),
    /// Compare a baseline run against a gated run of the same seed.
    Compare {
        /// Baseline report.json, or the directory holding it.
        baseline: PathBuf,
        /// Gated report.json, or the directory holding it.
        gated: PathBuf,
        /// Directory for savings.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    gate: Option<Toggle>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

/// A failure with its exit code and machine-readable description.
struct Failure {
    code: u8,
    kind: &'static str,
    field: Option<String>,
    error: anyhow::Error,
}

impl Failure {
    fn runtime(kind: &'static str, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 1,
            kind,
            field: None,
            error: error.into(),
        }
    }

    fn config(err: ConfigError) -> Self {
        let field = match &err {
            ConfigError::Invalid { field, .. } => Some(field.clone()),
            _ => None,
        };
        Failure {
            code: 2,
            kind: "config",
            field,
            error: err.into(),
        }
    }

    fn report(&self) {
        let mut body = json!({
            "error": self.kind,
            "message": format!("{:#}", self.error),
            "exit_code": self.code,
        });
        if let Some(field) = &self.field {
            body["field"] = json!(field);
        }
        eprintln!("{body}");
    }
}

impl From<SimError> for Failure {
    fn from(err: SimError) -> Self {
        match err {
            SimError::Config(c) => Failure::config(c),
            other => Failure::runtime("runtime", other),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let cfg = ExperimentConfig::load(path).map_err(Failure::config)?;
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn cmd_init(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::runtime(
            "exists",
            anyhow::anyhow!("{} already exists; pass --force to overwrite", path.display()),
        ));
    }
    std::fs::write(path, ExperimentConfig::default().to_json())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| Failure::runtime("io", e))?;
    eprintln!("wrote default config to {}", path.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    load_config(path)?;
    println!("{} is valid", path.display());
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) -> Result<(), Failure> {
    if let Some(seed) = args.seed {
        eprintln!("override: seed = {seed}");
        cfg.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        eprintln!("override: rounds = {rounds}");
        cfg.rounds = rounds;
    }
    if let Some(gate) = args.gate {
        let enabled = matches!(gate, Toggle::On);
        eprintln!("override: gate.enabled = {enabled}");
        cfg.gate.enabled = enabled;
    }
    if let Some(out) = &args.out {
        eprintln!("override: output_dir = {}", out.display());
        cfg.output_dir = out.clone();
    }
    if let Some(name) = &args.scenario {
        let scenario: Scenario = name.parse().map_err(Failure::config)?;
        eprintln!("override: scenario = {scenario}");
        cfg.scenario = Some(scenario);
    }
    cfg.validate().map_err(Failure::config)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(Failure::config)?;
    apply_overrides(&mut cfg, args)?;
    let total = cfg.rounds;
    let repeats = cfg.repeats;
    let report = run_experiment_with(&cfg, |repeat, m| {
        let tag = if repeats > 1 {
            format!("repeat {repeat} ")
        } else {
            String::new()
        };
        println!(
            "{tag}round {}/{total} accuracy {:.4} loss {:.4} participants {} skipped {}/{} dropped {} up {} B down {} B compute {}",
            m.round,
            m.global_accuracy,
            m.global_loss,
            m.participants,
            m.skipped_pre,
            m.skipped_post,
            m.dropped_msgs,
            m.bytes_up,
            m.bytes_down,
            m.compute_units
        );
    })?;
    let written = report.write_to(&cfg.output_dir)?;
    for path in written {
        log::info!("wrote {}", path.display());
    }
    println!(
        "final accuracy {:.4} after {} rounds; artifacts in {}",
        report.final_evaluation.accuracy,
        total,
        cfg.output_dir.display()
    );
    Ok(())
}

fn report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(REPORT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn cmd_compare(baseline: &Path, gated: &Path, out: &Path) -> Result<(), Failure> {
    let a = ExperimentReport::load(&report_path(baseline))?;
    let b = ExperimentReport::load(&report_path(gated))?;
    if a.config.seed != b.config.seed {
        return Err(Failure::runtime(
            "mismatched_runs",
            anyhow::anyhow!("seed {} vs seed {}", a.config.seed, b.config.seed),
        ));
    }
    let savings = account_costs(&a.summary, &b.summary).map_err(|e| Failure::runtime("mismatched_runs", e))?;
    println!(
        "communication savings {:.2}% ({} -> {} bytes)",
        savings.comm_savings_pct, savings.baseline_bytes, savings.gated_bytes
    );
    println!(
        "compute savings {:.2}% ({} -> {} units)",
        savings.compute_savings_pct, savings.baseline_compute, savings.gated_compute
    );
    println!("accuracy delta {:.4}", savings.accuracy_delta);
    std::fs::create_dir_all(out)
        .and_then(|_| {
            let text = serde_json::to_string_pretty(&savings).expect("savings serialize");
            std::fs::write(out.join(SAVINGS_FILE), text + "\n")
        })
        .with_context(|| format!("writing {}", out.join(SAVINGS_FILE).display()))
        .map_err(|e| Failure::runtime("io", e))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Init { config, force } => cmd_init(config, *force),
        Command::Validate { config } => cmd_validate(config),
        Command::Run(args) => cmd_run(args),
        Command::Compare { baseline, gated, out } => cmd_compare(baseline, gated, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.code)
        }
    }
}
