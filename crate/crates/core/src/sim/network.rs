//! Lossy, latent links between robots, drivers and the global server.
//!
//! Rounds are synchronous, so latency is only recorded. Whether a message
//! arrives is decided by a random stream keyed by the link and the round,
//! which keeps every outcome independent of evaluation order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ConfigError;
use crate::model::ClientId;
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkModel {
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub drop_prob: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            latency_min_ms: 5.0,
            latency_max_ms: 50.0,
            drop_prob: 0.0,
        }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.latency_min_ms >= 0.0 && self.latency_min_ms.is_finite()) {
            return Err(ConfigError::invalid("network.latency_min_ms", "must be finite and >= 0"));
        }
        if !(self.latency_max_ms >= self.latency_min_ms && self.latency_max_ms.is_finite()) {
            return Err(ConfigError::invalid(
                "network.latency_max_ms",
                "must be finite and >= latency_min_ms",
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(ConfigError::invalid("network.drop_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One directed link in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// Global server to a robot.
    Broadcast(ClientId),
    /// Robot to its group's driver.
    Upload(ClientId),
    /// Driver of a group to the global server.
    Regional(u32),
}

impl Link {
    fn key(self) -> [u64; 2] {
        match self {
            Link::Broadcast(c) => [1, c.0 as u64],
            Link::Upload(c) => [2, c.0 as u64],
            Link::Regional(g) => [3, g as u64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Delivered { bytes: usize, latency_ms: f64 },
    Dropped,
}

impl Delivery {
    pub fn is_delivered(&self) -> bool {
        matches!(self, Delivery::Delivered { .. })
    }
}

/// Sends `byte_len` bytes over `link` in `round`.
pub fn simulate_network(byte_len: usize, net: &NetworkModel, link: Link, round: u32, seed: u64) -> Delivery {
    let [kind, id] = link.key();
    let mut rng = rng_for(seed, Stream::Network, &[kind, id, round as u64]);
    let u: f64 = rng.random();
    if u < net.drop_prob {
        return Delivery::Dropped;
    }
    let span = net.latency_max_ms - net.latency_min_ms;
    Delivery::Delivered {
        bytes: byte_len,
        latency_ms: net.latency_min_ms + span * rng.random::<f64>(),
    }
}
