//! The round loop.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scenario};
use super::metrics::{evaluate_global, test_loss, EvalReport};
use super::network::{simulate_network, Delivery, Link};
use super::scenario::{stale_fleet_partition, strip_class, warm_start, STRIPPED_CLASS, TRANSFER_CLIENT};
use super::SimError;
use crate::cluster::{form_groups, generate_sites, reassign_on_failure, ClusterAssignment, RobotSite};
use crate::data::{apply_drift, generate_population, partition, DriftEvent, Partition};
use crate::gate::{post_training_check, pre_check_cost, pre_training_check, GateDecision};
use crate::model::{train_local, ClientId, ModelParams};
use crate::protocol::{
    decode_update, encode_update, encoded_len, global_aggregate, regional_aggregate, GlobalModel, RegionalUpdate,
    UpdateMessage,
};
use crate::seed::{derive_seed, Stream};

/// What happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Robots that trained and sent an update.
    pub participants: usize,
    /// Robots that did not train, including those the broadcast never reached.
    pub skipped_pre: usize,
    /// Robots that trained but withheld their update.
    pub skipped_post: usize,
    /// Messages lost in transit at any tier.
    pub dropped_msgs: usize,
    /// Delivered upstream bytes, robot-to-driver plus driver-to-server.
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub compute_units: u64,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    /// Robots whose copy of the global model was lost this round.
    pub unreached: usize,
    pub mean_latency_ms: f64,
    /// Regional updates averaged by the global server.
    pub server_aggregated: usize,
    pub num_classes: usize,
    pub num_groups: usize,
}

/// Everything the next round depends on.
#[derive(Debug, Clone)]
pub struct SimState {
    pub round: u32,
    pub config: Arc<ExperimentConfig>,
    pub events: Arc<Vec<DriftEvent>>,
    pub global: GlobalModel,
    pub partition: Partition,
    pub centers: Vec<Vec<f64>>,
    pub sites: Arc<Vec<RobotSite>>,
    pub assignment: ClusterAssignment,
    /// The last global model each robot received.
    pub held: BTreeMap<ClientId, ModelParams>,
    /// Robots that decided to skip before training last round.
    pub skipped_last: BTreeSet<ClientId>,
}

#[derive(Debug)]
struct ClientOutcome {
    client: ClientId,
    decision: Option<GateDecision>,
    unreached: bool,
    skip_flag: bool,
    dropped: usize,
    bytes_down: u64,
    compute: u64,
    latencies: Vec<f64>,
    received: Option<ModelParams>,
    upload: Option<Vec<u8>>,
}

impl SimState {
    /// Builds the population, partition, roster, groups and initial model.
    pub fn new(config: &ExperimentConfig) -> Result<Self, SimError> {
        config.validate()?;
        let events = config.load_events()?;
        let seed = config.seed;
        let pop_cfg = config.seeded_population();
        let population = generate_population(&pop_cfg)?;
        let n = pop_cfg.num_clients;
        let k = pop_cfg.num_classes;
        let d = pop_cfg.num_features;

        let mut part = match config.scenario {
            Some(Scenario::StaleFleet) => stale_fleet_partition(&population.train, &population.test, n, k, seed)?,
            _ => partition(&population.train, &population.test, n, config.partition, seed)?,
        };
        if config.scenario == Some(Scenario::KnowledgeTransfer) {
            part = strip_class(&part, TRANSFER_CLIENT, STRIPPED_CLASS);
        }

        let sites = match &config.sites {
            Some(s) => s.clone(),
            None => generate_sites(n, config.num_groups, seed),
        };
        let assignment = form_groups(&sites, config.num_groups, seed)?;

        let params = match config.scenario {
            Some(Scenario::StaleFleet) => warm_start(&part, &config.train, seed)?,
            _ => ModelParams::zeros(d, k)?,
        };

        Ok(Self {
            round: 0,
            config: Arc::new(config.clone()),
            events: Arc::new(events),
            global: GlobalModel::new(0, params),
            partition: part,
            centers: population.centers,
            sites: Arc::new(sites),
            assignment,
            held: BTreeMap::new(),
            skipped_last: BTreeSet::new(),
        })
    }

    pub fn evaluate(&self) -> Result<EvalReport, SimError> {
        Ok(evaluate_global(&self.global.params, &self.partition.test_set)?)
    }

    /// Applies the drift events and driver failures scheduled for `round`.
    pub fn apply_round_start(&self, round: u32) -> Result<SimState, SimError> {
        let mut next = self.clone();
        for event in self.events.iter().filter(|e| e.round == round) {
            let k = next.partition.num_classes + 1;
            next.global.params = next.global.params.expand_classes(k)?;
            next.global.num_classes = k;
            let (part, centers) = apply_drift(
                &next.partition,
                event,
                &next.centers,
                &self.config.seeded_population(),
                &next.assignment.region_map(),
                next.assignment.num_groups as u32,
            )?;
            next.partition = part;
            next.centers = centers;
            next.skipped_last.clear();
        }
        for failure in self.config.driver_failures.iter().filter(|f| f.round == round) {
            let driver = *next
                .assignment
                .drivers
                .get(failure.region as usize)
                .ok_or(SimError::NoSuchRegion {
                    round,
                    region: failure.region,
                })?;
            log::info!("round {round}: driver {driver} of region {} failed", failure.region);
            next.assignment = reassign_on_failure(&next.assignment, driver, &self.sites)?;
            next.assignment.validate()?;
            next.held.remove(&driver);
            next.skipped_last.remove(&driver);
        }
        Ok(next)
    }

    fn client_round(&self, client: ClientId, round: u32, down_len: usize) -> Result<ClientOutcome, SimError> {
        let cfg = &self.config;
        let seed = cfg.seed;
        let shard = &self.partition.shards[client.0 as usize];
        let global = &self.global.params;
        let mut out = ClientOutcome {
            client,
            decision: None,
            unreached: false,
            skip_flag: false,
            dropped: 0,
            bytes_down: 0,
            compute: 0,
            latencies: Vec::new(),
            received: None,
            upload: None,
        };

        let held = self.held.get(&client).filter(|_| self.skipped_last.contains(&client));
        let mut checked = false;
        if let Some(held) = held {
            out.compute += pre_check_cost(shard, &cfg.gate);
            let decision = pre_training_check(held, shard, &cfg.gate)?;
            if !decision.is_participate() {
                out.decision = Some(decision);
                out.skip_flag = true;
                return Ok(out);
            }
            checked = true;
        }

        match simulate_network(down_len, &cfg.network, Link::Broadcast(client), round, seed) {
            Delivery::Dropped => {
                out.dropped += 1;
                out.unreached = true;
                return Ok(out);
            }
            Delivery::Delivered { bytes, latency_ms } => {
                out.bytes_down += bytes as u64;
                out.latencies.push(latency_ms);
                out.received = Some(global.clone());
            }
        }

        if !checked {
            out.compute += pre_check_cost(shard, &cfg.gate);
            let decision = pre_training_check(global, shard, &cfg.gate)?;
            if !decision.is_participate() {
                out.decision = Some(decision);
                out.skip_flag = true;
                return Ok(out);
            }
        }

        let train_cfg = cfg
            .train
            .to_train_config(derive_seed(seed, Stream::Train, &[round as u64, client.0 as u64]));
        let (trained, stats) = train_local(global, shard, &train_cfg)?;
        out.compute += stats.compute_units;
        let decision = post_training_check(global, &trained, &stats, &cfg.gate)?;
        out.decision = Some(decision);
        if !decision.is_participate() {
            return Ok(out);
        }

        let msg = UpdateMessage::new(
            round,
            client.0,
            trained,
            shard.len() as u32,
            stats.loss_before,
            stats.loss_after,
        )?;
        let bytes = encode_update(&msg);
        match simulate_network(bytes.len(), &cfg.network, Link::Upload(client), round, seed) {
            Delivery::Dropped => out.dropped += 1,
            Delivery::Delivered { latency_ms, .. } => {
                out.latencies.push(latency_ms);
                out.upload = Some(bytes);
            }
        }
        Ok(out)
    }

    /// Runs the next round. `self` is left untouched, so a failed round
    /// leaves no partial state behind.
    pub fn run_round(&self) -> Result<(SimState, RoundMetrics), SimError> {
        let round = self.round + 1;
        let mut next = self.apply_round_start(round)?;
        next.round = round;

        let (d, k) = (next.global.params.num_features(), next.global.params.num_classes());
        let down_len = encoded_len(d, k);
        let clients: Vec<ClientId> = next.assignment.membership.keys().copied().collect();
        let outcomes: Vec<ClientOutcome> = if next.config.parallel {
            clients
                .par_iter()
                .map(|c| next.client_round(*c, round, down_len))
                .collect::<Result<_, _>>()?
        } else {
            clients
                .iter()
                .map(|c| next.client_round(*c, round, down_len))
                .collect::<Result<_, _>>()?
        };

        let mut m = RoundMetrics {
            round,
            participants: 0,
            skipped_pre: 0,
            skipped_post: 0,
            dropped_msgs: 0,
            bytes_up: 0,
            bytes_down: 0,
            compute_units: 0,
            global_loss: 0.0,
            global_accuracy: 0.0,
            per_class_recall: Vec::new(),
            unreached: 0,
            mean_latency_ms: 0.0,
            server_aggregated: 0,
            num_classes: k,
            num_groups: next.assignment.num_groups,
        };
        let mut latencies = Vec::new();
        let mut inbox: Vec<Vec<UpdateMessage>> = vec![Vec::new(); next.assignment.num_groups];
        let mut skipped = BTreeSet::new();
        for o in outcomes {
            m.dropped_msgs += o.dropped;
            m.bytes_down += o.bytes_down;
            m.compute_units += o.compute;
            latencies.extend(o.latencies);
            if o.unreached {
                m.unreached += 1;
                m.skipped_pre += 1;
            }
            match o.decision {
                Some(GateDecision::Participate) => m.participants += 1,
                Some(GateDecision::SkipPre(_)) => m.skipped_pre += 1,
                Some(GateDecision::SkipPost(_)) => m.skipped_post += 1,
                None => {}
            }
            if o.skip_flag {
                skipped.insert(o.client);
            }
            if let Some(received) = o.received {
                next.held.insert(o.client, received);
            }
            if let Some(bytes) = o.upload {
                m.bytes_up += bytes.len() as u64;
                let msg: UpdateMessage = decode_update(&bytes)?;
                if msg.params.num_features() != d || msg.params.num_classes() != k {
                    return Err(SimError::StaleUpdate {
                        client: o.client,
                        expected_classes: k,
                        found_classes: msg.params.num_classes(),
                    });
                }
                let group = next.assignment.membership[&o.client];
                inbox[group].push(msg);
            }
        }
        next.skipped_last = skipped;

        let mut regionals: Vec<RegionalUpdate> = Vec::new();
        for (g, msgs) in inbox.iter().enumerate() {
            if msgs.is_empty() {
                continue;
            }
            let (regional, rejected) = regional_aggregate(g as u32, round, msgs)?;
            m.dropped_msgs += rejected.len();
            let bytes = encode_update(&regional.to_message(round)?);
            match simulate_network(bytes.len(), &next.config.network, Link::Regional(g as u32), round, next.config.seed) {
                Delivery::Dropped => m.dropped_msgs += 1,
                Delivery::Delivered { latency_ms, .. } => {
                    latencies.push(latency_ms);
                    m.bytes_up += bytes.len() as u64;
                    let msg: UpdateMessage = decode_update(&bytes)?;
                    regionals.push(RegionalUpdate {
                        region_id: msg.sender_id,
                        params: msg.params,
                        total_samples: msg.sample_count as u64,
                        contributor_count: regional.contributor_count,
                        loss_before: msg.loss_before,
                        loss_after: msg.loss_after,
                    });
                }
            }
        }
        m.server_aggregated = regionals.len();
        if regionals.is_empty() {
            next.global.round = round;
        } else {
            next.global = global_aggregate(round, &regionals)?;
        }

        let eval = next.evaluate()?;
        m.global_loss = test_loss(&next.global.params, &next.partition.test_set)?;
        m.global_accuracy = eval.accuracy;
        m.per_class_recall = eval.per_class_recall;
        if !latencies.is_empty() {
            m.mean_latency_ms = latencies.iter().sum::<f64>() / latencies.len() as f64;
        }
        Ok((next, m))
    }
}
