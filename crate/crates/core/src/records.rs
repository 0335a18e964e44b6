//! Log records shared by serving, the aggregation pipeline and training.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::context::ContextVector;
use crate::model::ArmId;

/// The partition isolating one experiment variant's learning data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Keyspace {
    pub instance_id: String,
    pub test_id: String,
    pub variant_id: String,
}

impl Keyspace {
    pub fn new(
        instance_id: impl Into<String>,
        test_id: impl Into<String>,
        variant_id: impl Into<String>,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            test_id: test_id.into(),
            variant_id: variant_id.into(),
        }
    }

    /// Relative directory `{instance}/{test}/{variant}`.
    pub fn rel_path(&self) -> std::path::PathBuf {
        [&self.instance_id, &self.test_id, &self.variant_id]
            .iter()
            .collect()
    }

    /// Path components must be usable as directory names.
    pub fn validate(&self) -> Result<(), String> {
        for part in [&self.instance_id, &self.test_id, &self.variant_id] {
            if part.is_empty() || part == "." || part == ".." || part.contains(['/', '\\', '\0']) {
                return Err(format!("invalid keyspace component `{part}`"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Keyspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.instance_id, self.test_id, self.variant_id
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision_id: String,
    pub instance_id: String,
    pub test_id: String,
    pub variant_id: String,
    pub context: ContextVector,
    pub arm_id: ArmId,
    /// epoch milliseconds
    pub timestamp: i64,
    /// Version of the snapshot that produced the decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u64>,
    /// Arms that passed the constraint filter; absent means every arm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligible: Option<Vec<ArmId>>,
    /// Set when constraints left no eligible arm and the instance fell back
    /// to the unconstrained best.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl DecisionRecord {
    pub fn keyspace(&self) -> Keyspace {
        Keyspace::new(&self.instance_id, &self.test_id, &self.variant_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub decision_id: String,
    pub reward: f64,
    pub timestamp: i64,
}

/// The mini-batch unit: pulls and summed reward of one arm in one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTuple {
    pub keyspace: Keyspace,
    pub context: ContextVector,
    pub arm_id: ArmId,
    pub pulls: u64,
    pub reward_sum: f64,
    pub window_id: u64,
}
