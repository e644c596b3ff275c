//! Running whole experiments and writing their artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::engine::{RoundMetrics, SimState};
use super::metrics::{test_loss, EvalReport};
use super::SimError;
use crate::gate::RunSummary;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

pub const CSV_HEADER: &str = "round,participants,skipped_pre,skipped_post,dropped_msgs,bytes_up,bytes_down,compute_units,global_loss,global_accuracy";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub participants: u64,
    pub skipped_pre: u64,
    pub skipped_post: u64,
    pub dropped_msgs: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub compute_units: u64,
}

impl Totals {
    fn add(&mut self, m: &RoundMetrics) {
        self.participants += m.participants as u64;
        self.skipped_pre += m.skipped_pre as u64;
        self.skipped_post += m.skipped_post as u64;
        self.dropped_msgs += m.dropped_msgs as u64;
        self.bytes_up += m.bytes_up;
        self.bytes_down += m.bytes_down;
        self.compute_units += m.compute_units;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialEvaluation {
    pub global_loss: f64,
    pub global_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: u32,
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub totals: Totals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// The resolved configuration the run used.
    pub config: ExperimentConfig,
    pub initial: InitialEvaluation,
    pub rounds: Vec<RoundMetrics>,
    pub final_evaluation: EvalReport,
    pub final_loss: f64,
    pub totals: Totals,
    pub summary: RunSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repeats: Vec<RepeatSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_mean_accuracy: Option<f64>,
    /// Kept out of the report file so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.rounds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                m.round,
                m.participants,
                m.skipped_pre,
                m.skipped_post,
                m.dropped_msgs,
                m.bytes_up,
                m.bytes_down,
                m.compute_units,
                m.global_loss,
                m.global_accuracy
            );
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    }

    /// Writes `metrics.csv`, `report.json` and `timing.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
        std::fs::create_dir_all(dir).map_err(|e| SimError::Io(format!("{}: {e}", dir.display())))?;
        let timing = serde_json::json!({ "wall_clock_seconds": self.wall_clock_seconds });
        let files = [
            (METRICS_FILE, self.to_csv()),
            (REPORT_FILE, self.to_json()),
            (TIMING_FILE, format!("{timing}\n")),
        ];
        let mut written = Vec::new();
        for (name, content) in files {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Runs one seed to completion and keeps the final state.
pub fn run_single(
    config: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<(SimState, ExperimentReport), SimError> {
    let start = Instant::now();
    let mut state = SimState::new(config)?;
    let initial_eval = state.evaluate()?;
    let initial = InitialEvaluation {
        global_loss: test_loss(&state.global.params, &state.partition.test_set)?,
        global_accuracy: initial_eval.accuracy,
    };
    let mut rounds = Vec::with_capacity(config.rounds as usize);
    let mut totals = Totals::default();
    for _ in 0..config.rounds {
        let (next, metrics) = state.run_round()?;
        on_round(&metrics);
        totals.add(&metrics);
        rounds.push(metrics);
        state = next;
    }
    let final_evaluation = state.evaluate()?;
    let final_loss = test_loss(&state.global.params, &state.partition.test_set)?;
    let summary = RunSummary {
        rounds: config.rounds,
        num_clients: config.population.num_clients,
        bytes_up: totals.bytes_up,
        bytes_down: totals.bytes_down,
        compute_units: totals.compute_units,
        final_accuracy: final_evaluation.accuracy,
    };
    let report = ExperimentReport {
        config: config.clone(),
        initial,
        rounds,
        final_evaluation,
        final_loss,
        totals,
        summary,
        repeats: Vec::new(),
        repeat_mean_accuracy: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Runs the configured experiment, including any repeats. The returned
/// report describes repeat 0 and lists every repeat's summary.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut on_round: impl FnMut(u32, &RoundMetrics),
) -> Result<ExperimentReport, SimError> {
    let start = Instant::now();
    config.validate()?;
    let (_, mut report) = run_single(config, |m| on_round(0, m))?;
    if config.repeats > 1 {
        let mut summaries = vec![RepeatSummary {
            repeat: 0,
            seed: config.seed,
            final_accuracy: report.final_evaluation.accuracy,
            final_loss: report.final_loss,
            totals: report.totals,
        }];
        for i in 1..config.repeats {
            let cfg = ExperimentConfig {
                seed: config.repeat_seed(i),
                ..config.clone()
            };
            let (_, r) = run_single(&cfg, |m| on_round(i, m))?;
            summaries.push(RepeatSummary {
                repeat: i,
                seed: cfg.seed,
                final_accuracy: r.final_evaluation.accuracy,
                final_loss: r.final_loss,
                totals: r.totals,
            });
        }
        let mean = summaries.iter().map(|s| s.final_accuracy).sum::<f64>() / summaries.len() as f64;
        report.repeats = summaries;
        report.repeat_mean_accuracy = Some(mean);
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, SimError> {
    run_experiment_with(config, |_, _| {})
}
