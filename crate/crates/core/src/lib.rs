//! Contextual multi-armed bandits with a mini-batch training layer and a
//! constraint-aware online serving layer.
//!
//! - [`context`]: feature schemas and fine/coarse context encoding
//! - [`model`]: disjoint-arm LinUCB snapshots
//! - [`pipeline`]: decision/reward join and window aggregation
//! - [`training`]: task queue, trainer and Model Holder
//! - [`serving`]: eligibility rules and request serving
//! - [`health`]: continuity, stability and exploitation-ratio reports
//! - [`replay`]: classic and time-windowed replay, lambda tuning
//! - [`sim`]: synthetic worlds and end-to-end simulation

pub mod catalog;
pub mod config;
pub mod context;
pub mod exec;
pub mod health;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod records;
pub mod replay;
pub mod serving;
pub mod sim;
pub mod training;

pub use catalog::{ArmSource, ArmSpec};
pub use context::{ContextVector, FeatureSchema, RawRequest};
pub use exec::Execution;
pub use model::{ArmId, BanditModel, ModelConfig};
pub use records::{AggregateTuple, DecisionRecord, Keyspace, RewardRecord};
