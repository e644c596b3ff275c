//! Deterministic simulator for hierarchical federated learning across a
//! fleet of field robots.
//!
//! Robots train a small softmax classifier on their own data, regional driver
//! nodes average their group's updates, and a global server averages the
//! regional results. Optional self-regulation checkpoints let robots skip
//! training or uploading when their contribution would be negligible, and
//! every byte and gradient step is accounted for so gated and ungated runs
//! can be compared.
//!
//! The model and aggregation code is generic over [`Scalar`] (`f32` or
//! `f64`); the simulator itself runs in `f64`, and the aliases below name the
//! concrete types it uses.

pub mod cluster;
pub mod data;
pub mod gate;
pub mod model;
pub mod protocol;
pub mod scalar;
pub mod seed;
pub mod sim;

pub use scalar::Scalar;

pub use model::ClientId;

/// Double-precision parameters, the simulator's native model type.
pub type ModelParams = model::ModelParams<f64>;
pub type DataShard = model::DataShard<f64>;
pub type UpdateMessage = protocol::UpdateMessage<f64>;
pub type RegionalUpdate = protocol::RegionalUpdate<f64>;
pub type GlobalModel = protocol::GlobalModel<f64>;

pub type ModelParamsF32 = model::ModelParams<f32>;
pub type DataShardF32 = model::DataShard<f32>;
pub type UpdateMessageF32 = protocol::UpdateMessage<f32>;
