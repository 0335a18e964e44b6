//! Disjoint-arm LinUCB over ridge state, with immutable snapshots.
//!
//! Each arm keeps `A = lambda*I + sum(n * x x^T)` and `b = sum(r * x)`.
//! The coefficients `theta = A^-1 b` and the cached inverse are rebuilt from
//! a Cholesky factorization once per committed batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Cholesky};
use crate::records::AggregateTuple;

pub const MODEL_FORMAT: &str = "cmab-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Opaque arm identifier. Ordering is lexicographic and is the tie-break
/// order everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArmId(pub String);

impl ArmId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ArmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ArmId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionError { expected: usize, actual: usize },
    #[error("model has no arms")]
    NoArms,
    #[error("no eligible arm")]
    NoEligibleArm,
    #[error("unknown arm `{0}`")]
    UnknownArm(ArmId),
    #[error("duplicate arm `{0}`")]
    DuplicateArm(ArmId),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("matrix for arm `{0}` is not positive definite")]
    NotPositiveDefinite(ArmId),
    #[error("malformed model document: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub dimension: usize,
}

impl ModelConfig {
    pub fn new(dimension: usize) -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            dimension,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.dimension == 0 {
            return Err(ModelError::InvalidConfig("dimension must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ridge state of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    arm_id: ArmId,
    a: Vec<f64>,
    b: Vec<f64>,
    theta: Vec<f64>,
    a_inv: Vec<f64>,
    update_count: u64,
}

impl ArmModel {
    fn fresh(arm_id: ArmId, config: &ModelConfig) -> Self {
        let d = config.dimension;
        Self {
            arm_id,
            a: linalg::identity_scaled(d, config.lambda),
            b: vec![0.0; d],
            theta: vec![0.0; d],
            a_inv: linalg::identity_scaled(d, 1.0 / config.lambda),
            update_count: 0,
        }
    }

    fn from_state(
        arm_id: ArmId,
        a: Vec<f64>,
        b: Vec<f64>,
        update_count: u64,
    ) -> Result<Self, ModelError> {
        let mut arm = Self {
            arm_id,
            theta: Vec::new(),
            a_inv: Vec::new(),
            a,
            b,
            update_count,
        };
        arm.refresh()?;
        Ok(arm)
    }

    fn refresh(&mut self) -> Result<(), ModelError> {
        let d = self.b.len();
        let chol = Cholesky::factor(&self.a, d)
            .ok_or_else(|| ModelError::NotPositiveDefinite(self.arm_id.clone()))?;
        self.theta = chol.solve(&self.b);
        self.a_inv = chol.inverse();
        Ok(())
    }

    pub fn arm_id(&self) -> &ArmId {
        &self.arm_id
    }

    /// Design matrix accumulator, row-major.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn a_inv(&self) -> &[f64] {
        &self.a_inv
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        linalg::dot(&self.theta, x)
    }

    pub fn width(&self, x: &[f64]) -> f64 {
        linalg::quad_form(&self.a_inv, x).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub mean: f64,
    pub ucb: f64,
}

/// One observation for `update`: `pulls` pulls of `arm` in `context` with a
/// summed reward. Reward-only carries (`pulls == 0`) are accepted.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub context: &'a [f64],
    pub arm: &'a ArmId,
    pub pulls: u64,
    pub reward_sum: f64,
}

impl<'a> From<&'a AggregateTuple> for Observation<'a> {
    fn from(t: &'a AggregateTuple) -> Self {
        Self {
            context: t.context.unified(),
            arm: &t.arm_id,
            pulls: t.pulls,
            reward_sum: t.reward_sum,
        }
    }
}

/// An immutable model snapshot of one bandit instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditModel {
    instance_id: String,
    config: ModelConfig,
    arms: BTreeMap<ArmId, Arc<ArmModel>>,
    model_version: u64,
}

impl BanditModel {
    pub fn new(instance_id: impl Into<String>, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            instance_id: instance_id.into(),
            config,
            arms: BTreeMap::new(),
            model_version: 0,
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.model_version
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn arm(&self, id: &ArmId) -> Option<&ArmModel> {
        self.arms.get(id).map(Arc::as_ref)
    }

    pub fn arm_ids(&self) -> impl Iterator<Item = &ArmId> {
        self.arms.keys()
    }

    pub fn arm_count(&self) -> usize {
        self.arms.len()
    }

    pub fn contains(&self, id: &ArmId) -> bool {
        self.arms.contains_key(id)
    }

    fn check_dimension(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.config.dimension {
            return Err(ModelError::DimensionError {
                expected: self.config.dimension,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn score_arm(&self, arm: &ArmModel, x: &[f64]) -> ArmScore {
        let mean = arm.mean(x);
        ArmScore {
            mean,
            ucb: mean + self.config.alpha * arm.width(x),
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<BTreeMap<ArmId, ArmScore>, ModelError> {
        self.check_dimension(x)?;
        if self.arms.is_empty() {
            return Err(ModelError::NoArms);
        }
        Ok(self
            .arms
            .iter()
            .map(|(id, arm)| (id.clone(), self.score_arm(arm, x)))
            .collect())
    }

    /// Argmax of `ucb` over `eligible` (all arms when `None`); ties go to
    /// the smallest id.
    pub fn ucb_arm(
        &self,
        x: &[f64],
        eligible: Option<&BTreeSet<ArmId>>,
    ) -> Result<ArmId, ModelError> {
        self.argmax_by(x, eligible, |s| s.ucb)
    }

    /// Argmax of the mean estimate over `eligible`, ignoring the confidence
    /// width; ties go to the smallest id.
    pub fn greedy_arm(&self, x: &[f64], eligible: &BTreeSet<ArmId>) -> Result<ArmId, ModelError> {
        self.argmax_by(x, Some(eligible), |s| s.mean)
    }

    fn argmax_by(
        &self,
        x: &[f64],
        eligible: Option<&BTreeSet<ArmId>>,
        key: impl Fn(&ArmScore) -> f64,
    ) -> Result<ArmId, ModelError> {
        self.check_dimension(x)?;
        let candidates: Vec<&ArmId> = match eligible {
            Some(set) => {
                if set.is_empty() {
                    return Err(ModelError::NoEligibleArm);
                }
                if let Some(missing) = set.iter().find(|id| !self.arms.contains_key(*id)) {
                    return Err(ModelError::UnknownArm(missing.clone()));
                }
                set.iter().collect()
            }
            None => {
                if self.arms.is_empty() {
                    return Err(ModelError::NoArms);
                }
                self.arms.keys().collect()
            }
        };
        let mut best: Option<(&ArmId, f64)> = None;
        // candidates are in ascending id order, so strict > keeps the smallest id on ties
        for id in candidates {
            let value = key(&self.score_arm(&self.arms[id], x));
            if best.is_none_or(|(_, v)| value > v) {
                best = Some((id, value));
            }
        }
        Ok(best.expect("non-empty candidates").0.clone())
    }

    /// Applies a mini-batch and returns the successor snapshot. The receiver
    /// is left untouched on error.
    pub fn update_batch(&self, tuples: &[AggregateTuple]) -> Result<Self, ModelError> {
        self.update(tuples.iter().map(Observation::from))
    }

    pub fn update<'a, I>(&self, observations: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = Observation<'a>>,
    {
        let mut touched: BTreeMap<ArmId, ArmModel> = BTreeMap::new();
        for obs in observations {
            self.check_dimension(obs.context)?;
            if !obs.reward_sum.is_finite() {
                return Err(ModelError::InvalidValue(format!(
                    "non-finite reward {} for arm `{}`",
                    obs.reward_sum, obs.arm
                )));
            }
            if obs.context.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidValue("non-finite context".into()));
            }
            let arm = match touched.get_mut(obs.arm) {
                Some(arm) => arm,
                None => {
                    let base = self
                        .arms
                        .get(obs.arm)
                        .ok_or_else(|| ModelError::UnknownArm(obs.arm.clone()))?;
                    touched
                        .entry(obs.arm.clone())
                        .or_insert_with(|| (**base).clone())
                }
            };
            if obs.pulls > 0 {
                linalg::add_outer(&mut arm.a, obs.context, obs.pulls as f64);
            }
            linalg::axpy(&mut arm.b, obs.context, obs.reward_sum);
            arm.update_count += 1;
        }
        let mut next = self.clone();
        for (id, mut arm) in touched {
            arm.refresh()?;
            next.arms.insert(id, Arc::new(arm));
        }
        next.model_version += 1;
        Ok(next)
    }

    /// Single-pull online update.
    pub fn observe(&self, x: &[f64], arm: &ArmId, reward: f64) -> Result<Self, ModelError> {
        self.update([Observation {
            context: x,
            arm,
            pulls: 1,
            reward_sum: reward,
        }])
    }

    pub fn add_arm(&self, arm_id: ArmId) -> Result<Self, ModelError> {
        if self.arms.contains_key(&arm_id) {
            return Err(ModelError::DuplicateArm(arm_id));
        }
        let mut next = self.clone();
        let arm = ArmModel::fresh(arm_id.clone(), &self.config);
        next.arms.insert(arm_id, Arc::new(arm));
        next.model_version += 1;
        Ok(next)
    }

    pub fn remove_arm(&self, arm_id: &ArmId) -> Result<Self, ModelError> {
        if !self.arms.contains_key(arm_id) {
            return Err(ModelError::UnknownArm(arm_id.clone()));
        }
        let mut next = self.clone();
        next.arms.remove(arm_id);
        next.model_version += 1;
        Ok(next)
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format: MODEL_FORMAT.to_string(),
            format_version: MODEL_FORMAT_VERSION,
            instance_id: self.instance_id.clone(),
            config: self.config,
            model_version: self.model_version,
            arms: self
                .arms
                .values()
                .map(|arm| ArmState {
                    arm_id: arm.arm_id.clone(),
                    update_count: arm.update_count,
                    a: arm.a.clone(),
                    b: arm.b.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self, ModelError> {
        if doc.format != MODEL_FORMAT || doc.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format {} v{}",
                doc.format, doc.format_version
            )));
        }
        doc.config.validate()?;
        let d = doc.config.dimension;
        let mut arms = BTreeMap::new();
        for state in doc.arms {
            if state.a.len() != d * d || state.b.len() != d {
                return Err(ModelError::Format(format!(
                    "arm `{}` has wrong state size",
                    state.arm_id
                )));
            }
            if state.a.iter().chain(&state.b).any(|v| !v.is_finite()) {
                return Err(ModelError::Format(format!(
                    "arm `{}` has non-finite state",
                    state.arm_id
                )));
            }
            let id = state.arm_id.clone();
            let arm = ArmModel::from_state(state.arm_id, state.a, state.b, state.update_count)?;
            if arms.insert(id.clone(), Arc::new(arm)).is_some() {
                return Err(ModelError::DuplicateArm(id));
            }
        }
        Ok(Self {
            instance_id: doc.instance_id,
            config: doc.config,
            arms,
            model_version: doc.model_version,
        })
    }

    /// Canonical bytes: JSON with shortest round-trip float encoding.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_document(doc)
    }
}

/// Wire form of a model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub format_version: u32,
    pub instance_id: String,
    pub config: ModelConfig,
    pub model_version: u64,
    pub arms: Vec<ArmState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub arm_id: ArmId,
    pub update_count: u64,
    /// row-major `d x d`
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}
