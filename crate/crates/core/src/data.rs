//! Synthetic plant-condition population, client partitioning and the
//! new-class event feed.
//!
//! Each class is an isotropic Gaussian blob in feature space. Class centers
//! sit on a sphere of radius `class_separation`, drawn in random directions
//! and rejection-checked so every pair is at least `class_separation` apart.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClientId, DataShard, ModelError};
use crate::seed::{rng_for, Stream};

const CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid population config: {0}")]
    InvalidConfig(String),
    #[error("could not place center for class {class} after {attempts} attempts; separation too large for the feature dimension")]
    Geometry { class: usize, attempts: usize },
    #[error("{clients} clients requested but only {samples} training samples exist")]
    TooManyClients { clients: usize, samples: usize },
    #[error("event feed io error: {0}")]
    Io(String),
    #[error("event feed is not valid JSON: {0}")]
    Parse(String),
    #[error("event feed schema violation: {0}")]
    Schema(String),
    #[error("new class label {found} is not the next free label {expected}")]
    NonContiguousClass { expected: usize, found: usize },
    #[error("unknown region id {0}")]
    UnknownRegion(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Shape of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub num_classes: usize,
    pub num_clients: usize,
    pub num_features: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Filled from the experiment's master seed; not part of the file form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            num_clients: 150,
            num_features: 8,
            samples_per_class: 1250,
            class_separation: 4.5,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.num_clients < 1 {
            return bad("num_clients must be >= 1");
        }
        if self.num_features < 1 {
            return bad("num_features must be >= 1");
        }
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be >= 1");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be positive");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        Ok(())
    }

    /// Samples per class that land in the training split.
    pub fn train_per_class(&self) -> usize {
        self.samples_per_class * 4 / 5
    }

    pub fn test_per_class(&self) -> usize {
        self.samples_per_class - self.train_per_class()
    }
}

/// Generated data plus the class geometry needed to extend it later.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub train: DataShard,
    pub test: DataShard,
    /// One row per class, `num_features` wide.
    pub centers: Vec<Vec<f64>>,
}

fn place_center(
    existing: &[Vec<f64>],
    d: usize,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    for _ in 0..CENTER_ATTEMPTS {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x *= separation / norm);
        let far_enough = existing.iter().all(|c| {
            let dist = c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist >= separation
        });
        if far_enough {
            return Ok(v);
        }
    }
    Err(DataError::Geometry {
        class: existing.len(),
        attempts: CENTER_ATTEMPTS,
    })
}

fn draw_samples(
    shard: &mut DataShard,
    center: &[f64],
    sigma: f64,
    label: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut row = vec![0.0; center.len()];
    for _ in 0..count {
        for (r, c) in row.iter_mut().zip(center) {
            let z: f64 = StandardNormal.sample(rng);
            *r = c + sigma * z;
        }
        shard.push(&row, label)?;
    }
    Ok(())
}

/// Draws the full population and splits each class 80/20 into train and test.
pub fn generate_population(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let d = cfg.num_features;
    let mut geometry_rng = rng_for(cfg.seed, Stream::Population, &[0]);
    let mut centers = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let c = place_center(&centers, d, cfg.class_separation, &mut geometry_rng)?;
        centers.push(c);
    }

    let mut train = DataShard::empty(ClientId::POOL, d);
    let mut test = DataShard::empty(ClientId::POOL, d);
    for (label, center) in centers.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, Stream::Population, &[1, label as u64]);
        draw_samples(&mut train, center, cfg.noise_sigma, label, cfg.train_per_class(), &mut rng)?;
        draw_samples(&mut test, center, cfg.noise_sigma, label, cfg.test_per_class(), &mut rng)?;
    }
    Ok(Population {
        train,
        test,
        centers,
    })
}

/// How training data is spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionMode {
    /// Class-stratified round-robin; shard sizes differ by at most one.
    Equal,
    /// Per-class client proportions drawn from a symmetric Dirichlet(alpha).
    Dirichlet { alpha: f64 },
}

impl Default for PartitionMode {
    fn default() -> Self {
        PartitionMode::Equal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub mode: PartitionMode,
    /// Indexed by client id.
    pub shards: Vec<DataShard>,
    pub test_set: DataShard,
    pub num_classes: usize,
}

impl Partition {
    pub fn train_size(&self) -> usize {
        self.shards.iter().map(DataShard::len).sum()
    }

    pub fn total_samples(&self) -> usize {
        self.train_size() + self.test_set.len()
    }
}

fn indices_by_class(train: &DataShard) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in train.labels().iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

fn dirichlet_weights(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        w.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every draw underflowed; put the whole class on one client
        let pick = rng.random_range(0..n);
        w.iter_mut().enumerate().for_each(|(i, v)| *v = if i == pick { 1.0 } else { 0.0 });
    }
    w
}

/// Splits `train` across `num_clients` shards; `test` is carried along unchanged.
pub fn partition(
    train: &DataShard,
    test: &DataShard,
    num_clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(DataError::InvalidConfig("num_clients must be >= 1".into()));
    }
    if num_clients > train.len() {
        return Err(DataError::TooManyClients {
            clients: num_clients,
            samples: train.len(),
        });
    }
    let mut rng = rng_for(seed, Stream::Partition, &[]);
    let by_class = indices_by_class(train);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    match mode {
        PartitionMode::Equal => {
            let mut sequence = Vec::with_capacity(train.len());
            for idx in by_class.values() {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                sequence.extend(idx);
            }
            for (pos, i) in sequence.into_iter().enumerate() {
                assigned[pos % num_clients].push(i);
            }
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(DataError::InvalidConfig(format!(
                    "dirichlet alpha must be positive, got {alpha}"
                )));
            }
            for idx in by_class.values() {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                let weights = dirichlet_weights(alpha, num_clients, &mut rng);
                let n = idx.len();
                let mut cum = 0.0;
                let mut start = 0;
                for (client, w) in weights.iter().enumerate() {
                    cum += w;
                    let end = if client + 1 == num_clients {
                        n
                    } else {
                        ((cum * n as f64).round() as usize).clamp(start, n)
                    };
                    assigned[client].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
        }
    }

    let shards = assigned
        .iter()
        .enumerate()
        .map(|(c, idx)| train.select(idx, ClientId(c as u32)))
        .collect();
    let num_classes = by_class
        .keys()
        .chain(test.labels().iter())
        .max()
        .map_or(0, |m| m + 1);
    Ok(Partition {
        mode,
        shards,
        test_set: test.clone(),
        num_classes,
    })
}

/// A newly reported disease class appearing in some regions at a given round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    pub round: u32,
    pub new_class_label: usize,
    pub affected_regions: Vec<u32>,
    pub samples_per_affected_client: usize,
}

fn json_error(e: serde_json::Error) -> DataError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => DataError::Schema(e.to_string()),
        Category::Io => DataError::Io(e.to_string()),
        Category::Syntax | Category::Eof => DataError::Parse(e.to_string()),
    }
}

/// Parses and validates an event feed for a run that starts with
/// `num_classes` classes. Events come back ordered by round.
pub fn parse_event_feed(text: &str, num_classes: usize, horizon: Option<u32>) -> Result<Vec<DriftEvent>> {
    let mut events: Vec<DriftEvent> = serde_json::from_str(text).map_err(json_error)?;
    events.sort_by_key(|e| e.round);
    for (i, e) in events.iter().enumerate() {
        if e.samples_per_affected_client == 0 {
            return Err(DataError::Schema(format!(
                "event {i}: samples_per_affected_client must be >= 1"
            )));
        }
        if let Some(h) = horizon {
            if e.round > h {
                return Err(DataError::Schema(format!(
                    "event {i}: round {} is beyond the {h}-round horizon",
                    e.round
                )));
            }
        }
        let expected = num_classes + i;
        if e.new_class_label != expected {
            return Err(DataError::NonContiguousClass {
                expected,
                found: e.new_class_label,
            });
        }
    }
    Ok(events)
}

pub fn load_event_feed(path: &Path, num_classes: usize, horizon: Option<u32>) -> Result<Vec<DriftEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    parse_event_feed(&text, num_classes, horizon)
}

/// Introduces the event's class: a new Gaussian center, samples appended to
/// every client of the affected regions and to the test set. Existing samples
/// are left untouched.
///
/// `regions` maps each live client to its region id; region ids run from 0 to
/// `num_regions - 1`. The returned centers include the new class.
pub fn apply_drift(
    partition: &Partition,
    event: &DriftEvent,
    centers: &[Vec<f64>],
    cfg: &PopulationConfig,
    regions: &BTreeMap<ClientId, u32>,
    num_regions: u32,
) -> Result<(Partition, Vec<Vec<f64>>)> {
    if event.new_class_label != partition.num_classes || centers.len() != partition.num_classes {
        return Err(DataError::NonContiguousClass {
            expected: partition.num_classes,
            found: event.new_class_label,
        });
    }
    if let Some(&bad) = event.affected_regions.iter().find(|&&r| r >= num_regions) {
        return Err(DataError::UnknownRegion(bad));
    }
    let label = event.new_class_label;
    let d = partition.test_set.num_features();
    let mut geometry_rng = rng_for(cfg.seed, Stream::Drift, &[label as u64]);
    let center = place_center(centers, d, cfg.class_separation, &mut geometry_rng)?;

    let mut next = partition.clone();
    for shard in next.shards.iter_mut() {
        let id = shard.client_id();
        let affected = regions
            .get(&id)
            .is_some_and(|r| event.affected_regions.contains(r));
        if affected {
            let mut rng = rng_for(cfg.seed, Stream::Drift, &[label as u64, 1, id.0 as u64]);
            draw_samples(shard, &center, cfg.noise_sigma, label, event.samples_per_affected_client, &mut rng)?;
        }
    }
    let mut rng = rng_for(cfg.seed, Stream::Drift, &[label as u64, 2]);
    draw_samples(&mut next.test_set, &center, cfg.noise_sigma, label, cfg.test_per_class(), &mut rng)?;
    next.num_classes += 1;

    let mut new_centers = centers.to_vec();
    new_centers.push(center);
    Ok((next, new_centers))
}
