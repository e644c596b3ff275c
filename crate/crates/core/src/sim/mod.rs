//! Round-driven simulation of the fleet: broadcast, gate, train, upload
//! through the network, aggregate regionally then globally, evaluate.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod network;
pub mod report;
pub mod scenario;

use std::path::PathBuf;

use thiserror::Error;

use crate::cluster::ClusterError;
use crate::data::DataError;
use crate::gate::GateError;
use crate::model::{ClientId, DataShard, ModelError, ModelParams};
use crate::protocol::{ProtocolError, WireError};

pub use config::{DriverFailure, ExperimentConfig, Scenario, TrainSettings};
pub use engine::{RoundMetrics, SimState};
pub use metrics::{evaluate_global, metrics_from_confusion, EvalReport};
pub use network::{simulate_network, Delivery, Link, NetworkModel};
pub use report::{run_experiment, run_experiment_with, run_single, ExperimentReport, Totals};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read config {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("round {round}: no region {region} to fail")]
    NoSuchRegion { round: u32, region: u32 },
    #[error("update from {client} has {found_classes} classes, global model has {expected_classes}")]
    StaleUpdate {
        client: ClientId,
        expected_classes: usize,
        found_classes: usize,
    },
    #[error("{0}")]
    Io(String),
}

impl SimError {
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_))
    }
}

/// Trains one model on the whole training set from zero parameters with
/// the given settings and scores it on `test`.
pub fn centralized_baseline(
    train: &DataShard,
    test: &DataShard,
    num_classes: usize,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(ModelParams, EvalReport), SimError> {
    let start = ModelParams::zeros(train.num_features(), num_classes)?;
    let cfg = settings.to_train_config(crate::seed::derive_seed(seed, crate::seed::Stream::Train, &[u64::MAX]));
    let (params, _) = crate::model::train_local(&start, train, &cfg)?;
    let report = evaluate_global(&params, test)?;
    Ok((params, report))
}
