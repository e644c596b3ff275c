//! Self-regulation checkpoints.
//!
//! Before training, a client evaluates the model it holds on its own data and
//! sits the round out if the model already fits (`loss < tau_pre`). After
//! training, it withholds the upload if the update barely moved the model
//! (relative norm `< tau_post`) or did not improve its local loss by at least
//! `min_improvement`. [`account_costs`] compares a gated run with a
//! seed-matched ungated one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{loss, DataShard, ModelError, ModelParams, TrainStats};
use crate::scalar::Scalar;

/// Guard for the relative-update ratio when the reference model is all zeros.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("runs are not comparable: {0}")]
    MismatchedRuns(String),
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
}

/// Checkpoint thresholds.
///
/// Defaults: `tau_pre = 0.05` (mean cross-entropy), `tau_post = 1e-3`
/// (relative update norm), `min_improvement = 0.0`, gate disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub enabled: bool,
    pub tau_pre: f64,
    pub tau_post: f64,
    pub min_improvement: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            tau_pre: 0.05,
            tau_post: 1e-3,
            min_improvement: 0.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        for (name, v) in [
            ("tau_pre", self.tau_pre),
            ("tau_post", self.tau_post),
            ("min_improvement", self.min_improvement),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GateError::InvalidConfig(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    /// The held model already fits the local data.
    AlreadyFit,
    NoData,
    /// Training moved the model by a negligible relative amount.
    NegligibleUpdate,
    /// Local loss did not improve enough.
    NoImprovement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateDecision {
    Participate,
    SkipPre(SkipReason),
    SkipPost(SkipReason),
}

impl GateDecision {
    pub fn is_participate(&self) -> bool {
        matches!(self, GateDecision::Participate)
    }
}

/// Checkpoint before training. Costs one full-shard loss evaluation
/// ([`pre_check_cost`]) when the gate is enabled and the shard is nonempty.
pub fn pre_training_check<T: Scalar>(
    global: &ModelParams<T>,
    shard: &DataShard<T>,
    cfg: &GateConfig,
) -> Result<GateDecision, GateError> {
    if shard.is_empty() {
        return Ok(GateDecision::SkipPre(SkipReason::NoData));
    }
    if !cfg.enabled {
        return Ok(GateDecision::Participate);
    }
    let local = loss(global, shard, 0.0)?;
    if local < cfg.tau_pre {
        Ok(GateDecision::SkipPre(SkipReason::AlreadyFit))
    } else {
        Ok(GateDecision::Participate)
    }
}

/// Compute units charged for a pre-training check on `shard`.
pub fn pre_check_cost<T: Scalar>(shard: &DataShard<T>, cfg: &GateConfig) -> u64 {
    if cfg.enabled {
        shard.len() as u64
    } else {
        0
    }
}

/// `‖trained − global‖ / max(‖global‖, ε)`
pub fn relative_update_norm<T: Scalar>(global: &ModelParams<T>, trained: &ModelParams<T>) -> Result<f64, GateError> {
    let delta = global.distance(trained)?.to_f64_lossy();
    Ok(delta / global.l2_norm().to_f64_lossy().max(NORM_EPSILON))
}

/// Checkpoint after training.
pub fn post_training_check<T: Scalar>(
    global: &ModelParams<T>,
    trained: &ModelParams<T>,
    stats: &TrainStats,
    cfg: &GateConfig,
) -> Result<GateDecision, GateError> {
    let r = relative_update_norm(global, trained)?;
    if !cfg.enabled {
        return Ok(GateDecision::Participate);
    }
    if r < cfg.tau_post {
        return Ok(GateDecision::SkipPost(SkipReason::NegligibleUpdate));
    }
    if stats.loss_before - stats.loss_after < cfg.min_improvement {
        return Ok(GateDecision::SkipPost(SkipReason::NoImprovement));
    }
    Ok(GateDecision::Participate)
}

/// The cost totals of one finished run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: u32,
    pub num_clients: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub compute_units: u64,
    pub final_accuracy: f64,
}

impl RunSummary {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub baseline_bytes: u64,
    pub gated_bytes: u64,
    pub baseline_bytes_up: u64,
    pub gated_bytes_up: u64,
    pub baseline_compute: u64,
    pub gated_compute: u64,
    pub comm_savings_pct: f64,
    pub compute_savings_pct: f64,
    /// Baseline final accuracy minus gated final accuracy.
    pub accuracy_delta: f64,
}

fn savings_pct(baseline: u64, gated: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        100.0 * (baseline as f64 - gated as f64) / baseline as f64
    }
}

/// Savings of `gated` relative to `baseline`. Negative percentages mean the
/// gate cost more than it saved.
pub fn account_costs(baseline: &RunSummary, gated: &RunSummary) -> Result<SavingsReport, GateError> {
    if baseline.rounds != gated.rounds {
        return Err(GateError::MismatchedRuns(format!(
            "{} rounds vs {} rounds",
            baseline.rounds, gated.rounds
        )));
    }
    if baseline.num_clients != gated.num_clients {
        return Err(GateError::MismatchedRuns(format!(
            "{} clients vs {} clients",
            baseline.num_clients, gated.num_clients
        )));
    }
    Ok(SavingsReport {
        baseline_bytes: baseline.total_bytes(),
        gated_bytes: gated.total_bytes(),
        baseline_bytes_up: baseline.bytes_up,
        gated_bytes_up: gated.bytes_up,
        baseline_compute: baseline.compute_units,
        gated_compute: gated.compute_units,
        comm_savings_pct: savings_pct(baseline.total_bytes(), gated.total_bytes()),
        compute_savings_pct: savings_pct(baseline.compute_units, gated.compute_units),
        accuracy_delta: baseline.final_accuracy - gated.final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClientId;
    use proptest::prelude::*;

    fn on() -> GateConfig {
        GateConfig {
            enabled: true,
            ..GateConfig::default()
        }
    }

    fn stats(before: f64, after: f64) -> TrainStats {
        TrainStats {
            loss_before: before,
            loss_after: after,
            grad_steps: 1,
            compute_units: 1,
        }
    }

    fn two_point_shard() -> DataShard {
        let mut s = DataShard::empty(ClientId(0), 1);
        s.push(&[1.0], 0).unwrap();
        s.push(&[-1.0], 1).unwrap();
        s
    }

    #[test]
    fn zero_tau_pre_never_skips_for_fit() {
        let cfg = GateConfig { tau_pre: 0.0, ..on() };
        // perfectly fit model: loss is exactly 0, and 0 < 0 is false
        let p = ModelParams::from_parts(1, 2, vec![900.0, -900.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(loss(&p, &two_point_shard(), 0.0).unwrap(), 0.0);
        assert_eq!(pre_training_check(&p, &two_point_shard(), &cfg).unwrap(), GateDecision::Participate);
    }

    #[test]
    fn empty_shard_is_no_data() {
        let p = ModelParams::<f64>::zeros(1, 2).unwrap();
        let s = DataShard::empty(ClientId(0), 1);
        assert_eq!(
            pre_training_check(&p, &s, &on()).unwrap(),
            GateDecision::SkipPre(SkipReason::NoData)
        );
        assert_eq!(pre_check_cost(&s, &on()), 0);
    }

    #[test]
    fn fitted_model_is_skipped() {
        // per-sample loss is ln(1 + e^(-2w)); solve for a loss of 0.01
        let w = ((1.0f64 / (0.01f64.exp() - 1.0)).ln()) / 2.0;
        let p = ModelParams::from_parts(1, 2, vec![w, -w], vec![0.0, 0.0]).unwrap();
        let l = loss(&p, &two_point_shard(), 0.0).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        let cfg = GateConfig { tau_pre: 0.05, ..on() };
        assert_eq!(
            pre_training_check(&p, &two_point_shard(), &cfg).unwrap(),
            GateDecision::SkipPre(SkipReason::AlreadyFit)
        );
        assert_eq!(pre_check_cost(&two_point_shard(), &cfg), 2);
    }

    #[test]
    fn disabled_gate_always_participates_with_data() {
        let p = ModelParams::from_parts(1, 2, vec![900.0, -900.0], vec![0.0, 0.0]).unwrap();
        let cfg = GateConfig::default();
        assert_eq!(pre_training_check(&p, &two_point_shard(), &cfg).unwrap(), GateDecision::Participate);
        assert_eq!(post_training_check(&p, &p, &stats(1.0, 1.0), &cfg).unwrap(), GateDecision::Participate);
        assert_eq!(pre_check_cost(&two_point_shard(), &cfg), 0);
    }

    #[test]
    fn unchanged_model_is_negligible() {
        let p = ModelParams::from_parts(1, 2, vec![0.5, -0.5], vec![0.1, 0.0]).unwrap();
        assert_eq!(
            post_training_check(&p, &p, &stats(1.0, 0.5), &on()).unwrap(),
            GateDecision::SkipPost(SkipReason::NegligibleUpdate)
        );
    }

    #[test]
    fn disabled_thresholds_always_participate() {
        let cfg = GateConfig {
            tau_post: 0.0,
            min_improvement: 0.0,
            ..on()
        };
        let p = ModelParams::from_parts(1, 2, vec![0.5, -0.5], vec![0.1, 0.0]).unwrap();
        assert_eq!(post_training_check(&p, &p, &stats(1.0, 1.0), &cfg).unwrap(), GateDecision::Participate);
    }

    #[test]
    fn epsilon_guard_on_zero_global() {
        let g = ModelParams::<f64>::zeros(1, 2).unwrap();
        let t = ModelParams::from_parts(1, 2, vec![1e-6, 0.0], vec![0.0, 0.0]).unwrap();
        let r = relative_update_norm(&g, &t).unwrap();
        assert!((r - 1e6).abs() < 1e-3);
        let cfg = GateConfig { tau_post: 0.5, ..on() };
        assert_eq!(post_training_check(&g, &t, &stats(1.0, 0.9), &cfg).unwrap(), GateDecision::Participate);
    }

    #[test]
    fn no_improvement_is_withheld() {
        let g = ModelParams::<f64>::zeros(1, 2).unwrap();
        let t = ModelParams::from_parts(1, 2, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let cfg = GateConfig {
            min_improvement: 0.1,
            ..on()
        };
        assert_eq!(
            post_training_check(&g, &t, &stats(1.0, 0.95), &cfg).unwrap(),
            GateDecision::SkipPost(SkipReason::NoImprovement)
        );
    }

    #[test]
    fn post_check_rejects_shape_mismatch() {
        let g = ModelParams::<f64>::zeros(1, 2).unwrap();
        let t = ModelParams::<f64>::zeros(1, 3).unwrap();
        assert!(post_training_check(&g, &t, &stats(1.0, 0.5), &on()).is_err());
    }

    fn summary(up: u64, down: u64, compute: u64, acc: f64) -> RunSummary {
        RunSummary {
            rounds: 5,
            num_clients: 10,
            bytes_up: up,
            bytes_down: down,
            compute_units: compute,
            final_accuracy: acc,
        }
    }

    #[test]
    fn identical_runs_save_nothing() {
        let s = summary(100, 300, 50, 0.9);
        let r = account_costs(&s, &s).unwrap();
        assert_eq!(r.comm_savings_pct, 0.0);
        assert_eq!(r.compute_savings_pct, 0.0);
        assert_eq!(r.accuracy_delta, 0.0);
    }

    #[test]
    fn all_uploads_withheld_saves_upstream_share() {
        let base = summary(100, 300, 50, 0.9);
        let gated = summary(0, 300, 50, 0.5);
        let r = account_costs(&base, &gated).unwrap();
        assert!((r.comm_savings_pct - 25.0).abs() < 1e-12);
        assert!((r.accuracy_delta - 0.4).abs() < 1e-12);
    }

    #[test]
    fn overhead_is_negative_not_clamped() {
        let r = account_costs(&summary(10, 10, 100, 0.9), &summary(10, 10, 120, 0.9)).unwrap();
        assert!((r.compute_savings_pct + 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_baseline_reports_zero() {
        let r = account_costs(&summary(0, 0, 0, 0.1), &summary(0, 0, 0, 0.1)).unwrap();
        assert_eq!(r.comm_savings_pct, 0.0);
    }

    #[test]
    fn mismatched_runs() {
        let a = summary(1, 1, 1, 0.5);
        let mut b = a;
        b.rounds = 6;
        assert!(matches!(account_costs(&a, &b), Err(GateError::MismatchedRuns(_))));
        let mut c = a;
        c.num_clients = 11;
        assert!(matches!(account_costs(&a, &c), Err(GateError::MismatchedRuns(_))));
    }

    proptest! {
        #[test]
        fn raising_tau_pre_only_adds_skips(w in -5.0f64..5.0, b in -2.0f64..2.0, lo in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let p = ModelParams::from_parts(1, 2, vec![w, -w], vec![b, 0.0]).unwrap();
            let s = two_point_shard();
            let low = GateConfig { tau_pre: lo, ..on() };
            let high = GateConfig { tau_pre: lo + extra, ..on() };
            let d_low = pre_training_check(&p, &s, &low).unwrap();
            let d_high = pre_training_check(&p, &s, &high).unwrap();
            if d_low == GateDecision::SkipPre(SkipReason::AlreadyFit) {
                prop_assert_eq!(d_high, d_low);
            }
        }

        #[test]
        fn raising_tau_post_only_adds_skips(dw in -1.0f64..1.0, lo in 0.0f64..1.0, extra in 0.0f64..1.0) {
            let g = ModelParams::from_parts(1, 2, vec![0.5, -0.5], vec![0.0, 0.0]).unwrap();
            let t = ModelParams::from_parts(1, 2, vec![0.5 + dw, -0.5], vec![0.0, 0.0]).unwrap();
            let low = GateConfig { tau_post: lo, ..on() };
            let high = GateConfig { tau_post: lo + extra, ..on() };
            let st = stats(1.0, 0.5);
            let d_low = post_training_check(&g, &t, &st, &low).unwrap();
            let d_high = post_training_check(&g, &t, &st, &high).unwrap();
            if d_low == GateDecision::SkipPost(SkipReason::NegligibleUpdate) {
                prop_assert_eq!(d_high, d_low);
            }
        }

        #[test]
        fn savings_within_bounds_when_gated_is_cheaper(base in 1u64..10_000, frac in 0.0f64..=1.0) {
            let gated = (base as f64 * frac) as u64;
            let r = account_costs(&summary(base, 0, base, 0.5), &summary(gated, 0, gated, 0.5)).unwrap();
            prop_assert!((0.0..=100.0).contains(&r.comm_savings_pct));
            prop_assert!((0.0..=100.0).contains(&r.compute_savings_pct));
        }
    }
}
