//! Experiment configuration, in the JSON file form the CLI reads and writes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::network::NetworkModel;
use super::ConfigError;
use crate::cluster::RobotSite;
use crate::data::{load_event_feed, DriftEvent, PartitionMode, PopulationConfig};
use crate::gate::GateConfig;
use crate::model::{ClientId, TrainConfig};
use crate::seed::{derive_seed, Stream};

/// Local optimizer settings shared by every robot. The per-client shuffle
/// seed is derived from the master seed each round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub l2_penalty: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 6,
            batch_size: 10,
            l2_penalty: 1e-4,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            l2_penalty: self.l2_penalty,
            rng_seed,
        }
    }
}

/// Bundled experiment variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// 40% of the fleet holds only data the warm-started global model
    /// already fits.
    StaleFleet,
    /// One robot never sees a class that the rest of the fleet does.
    KnowledgeTransfer,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::StaleFleet, Scenario::KnowledgeTransfer];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::StaleFleet => "stale-fleet",
            Scenario::KnowledgeTransfer => "knowledge-transfer",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Scenario::ALL.iter().map(|sc| sc.name()).collect();
            ConfigError::invalid("scenario", format!("unknown scenario {s:?}, expected one of {known:?}"))
        })
    }
}

/// The driver of `region` stops responding at the start of `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverFailure {
    pub round: u32,
    pub region: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub partition: PartitionMode,
    /// Number of regional groups formed by clustering.
    pub num_groups: usize,
    /// Explicit roster; generated from the seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<RobotSite>>,
    pub gate: GateConfig,
    pub network: NetworkModel,
    pub rounds: u32,
    pub train: TrainSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event_feed: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub driver_failures: Vec<DriverFailure>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Independent runs with derived seeds; the first uses `seed` itself.
    pub repeats: u32,
    /// Run per-client work on a thread pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            population: PopulationConfig::default(),
            partition: PartitionMode::Equal,
            num_groups: 10,
            sites: None,
            gate: GateConfig::default(),
            network: NetworkModel::default(),
            rounds: 50,
            train: TrainSettings::default(),
            event_feed: None,
            scenario: None,
            driver_failures: Vec::new(),
            seed: 2024,
            output_dir: PathBuf::from("out"),
            repeats: 1,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Population settings with the master seed filled in.
    pub fn seeded_population(&self) -> PopulationConfig {
        PopulationConfig {
            seed: self.seed,
            ..self.population.clone()
        }
    }

    /// Master seed of repeat `index`; repeat 0 is the configured seed.
    pub fn repeat_seed(&self, index: u32) -> u64 {
        if index == 0 {
            self.seed
        } else {
            derive_seed(self.seed, Stream::Repeat, &[index as u64])
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.population
            .validate()
            .map_err(|e| ConfigError::invalid("population", e.to_string()))?;
        if let PartitionMode::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(ConfigError::invalid("partition.alpha", "must be positive"));
            }
        }
        let n = self.population.num_clients;
        let all_hinted = self
            .sites
            .as_ref()
            .is_some_and(|s| !s.is_empty() && s.iter().all(|x| x.region_hint.is_some()));
        if !all_hinted {
            if self.num_groups < 1 {
                return Err(ConfigError::invalid("num_groups", "must be >= 1"));
            }
            if self.num_groups > n {
                return Err(ConfigError::invalid(
                    "num_groups",
                    format!("{} groups exceed {} clients", self.num_groups, n),
                ));
            }
        }
        if let Some(sites) = &self.sites {
            if sites.len() != n {
                return Err(ConfigError::invalid(
                    "sites",
                    format!("{} sites listed for {} clients", sites.len(), n),
                ));
            }
            let mut ids: Vec<ClientId> = sites.iter().map(|s| s.client_id).collect();
            ids.sort();
            if ids.iter().enumerate().any(|(i, c)| c.0 as usize != i) {
                return Err(ConfigError::invalid("sites", format!("client ids must be exactly 0..{n}")));
            }
            if let Some(s) = sites.iter().find(|s| !(s.position.0.is_finite() && s.position.1.is_finite())) {
                return Err(ConfigError::invalid("sites", format!("{} has a non-finite position", s.client_id)));
            }
        }
        self.gate
            .validate()
            .map_err(|e| ConfigError::invalid("gate", e.to_string()))?;
        self.network.validate()?;
        self.train
            .to_train_config(0)
            .validate()
            .map_err(|e| ConfigError::invalid("train", e.to_string()))?;
        for (i, f) in self.driver_failures.iter().enumerate() {
            if f.round < 1 || f.round > self.rounds {
                return Err(ConfigError::invalid(
                    format!("driver_failures[{i}].round"),
                    format!("must lie in 1..={}", self.rounds),
                ));
            }
        }
        if self.repeats < 1 {
            return Err(ConfigError::invalid("repeats", "must be >= 1"));
        }
        Ok(())
    }

    /// Reads and checks the drift event feed, if one is configured.
    pub fn load_events(&self) -> Result<Vec<DriftEvent>, ConfigError> {
        match &self.event_feed {
            None => Ok(Vec::new()),
            Some(path) => load_event_feed(path, self.population.num_classes, Some(self.rounds))
                .map_err(|e| ConfigError::invalid("event_feed", e.to_string())),
        }
    }
}
