//! Update messages and sample-weighted federated averaging.
//!
//! Clients send full trained parameters to their region's driver node, the
//! driver averages them into a [`RegionalUpdate`], and the global server
//! averages regional results into the next [`GlobalModel`]. Because both tiers
//! weight by sample count, the two-tier result equals a flat average over all
//! contributing clients.

mod aggregate;
mod wire;

pub use aggregate::{fed_avg, global_aggregate, regional_aggregate, GlobalModel, RegionalUpdate};
pub use wire::{decode_update, encode_update, encoded_len, UpdateMessage, WireError, HEADER_LEN, MAGIC, PROTOCOL_VERSION, TRAILER_LEN};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("update shape {found_features}x{found_classes} does not match {expected_features}x{expected_classes}")]
    ShapeMismatch {
        expected_features: usize,
        expected_classes: usize,
        found_features: usize,
        found_classes: usize,
    },
    #[error("aggregation weight must be >= 1")]
    ZeroWeight,
    #[error("update for round {found} arrived during round {expected}")]
    RoundMismatch { expected: u32, found: u32 },
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;
