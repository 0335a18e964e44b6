//! Online serving with business-rule constraints.
//!
//! Per request: encode the context, drop arms the feed's rules forbid, and
//! serve the highest-UCB arm among the rest. Eligibility follows the
//! sleeping-bandits rule: only awake (eligible) arms compete.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ArmCatalog, ArmSpec};
use crate::context::{ContextError, FeatureSchema, RawRequest};
use crate::io::JsonlAppender;
use crate::model::{ArmId, ArmScore, ModelError};
use crate::pipeline::{PipelineError, PipelineStore};
use crate::records::{DecisionRecord, Keyspace, RewardRecord};
use crate::training::{ModelHolder, TrainError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ConstraintRule {
    /// No more than `j` consecutive cards of `arm_type`.
    MaxConsecutive { arm_type: String, j: usize },
    /// At least one card of `arm_type` within the first `n` cards.
    MinWithinPrefix { arm_type: String, n: usize },
}

impl ConstraintRule {
    pub fn validate(&self, declared_types: Option<&BTreeSet<String>>) -> Result<(), String> {
        let (t, limit) = match self {
            ConstraintRule::MaxConsecutive { arm_type, j } => (arm_type, *j),
            ConstraintRule::MinWithinPrefix { arm_type, n } => (arm_type, *n),
        };
        if limit == 0 {
            return Err(format!("rule {self:?} needs a positive limit"));
        }
        if let Some(types) = declared_types {
            if !types.contains(t) {
                return Err(format!("rule {self:?} references undeclared type `{t}`"));
            }
        }
        Ok(())
    }
}

/// Serving history of one feed session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedState {
    pub session_id: String,
    pub served_types: Vec<String>,
}

impl FeedState {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            served_types: Vec::new(),
        }
    }

    /// Index of the next card.
    pub fn position(&self) -> usize {
        self.served_types.len()
    }

    pub fn push(&mut self, arm_type: impl Into<String>) {
        self.served_types.push(arm_type.into());
    }
}

/// Arms allowed by every rule given the feed so far.
pub fn eligible_arms<'a, I>(arms: I, rules: &[ConstraintRule], feed: &FeedState) -> BTreeSet<ArmId>
where
    I: IntoIterator<Item = (&'a ArmId, &'a str)>,
{
    let mut excluded: BTreeSet<&str> = BTreeSet::new();
    let mut forced: Option<BTreeSet<&str>> = None;
    let served = &feed.served_types;
    for rule in rules {
        match rule {
            ConstraintRule::MaxConsecutive { arm_type, j } => {
                if served.len() >= *j && served[served.len() - j..].iter().all(|t| t == arm_type) {
                    excluded.insert(arm_type);
                }
            }
            ConstraintRule::MinWithinPrefix { arm_type, n } => {
                if feed.position() + 1 == *n && !served.iter().any(|t| t == arm_type) {
                    let only: BTreeSet<&str> = [arm_type.as_str()].into();
                    forced = Some(match forced {
                        None => only,
                        Some(prev) => prev.intersection(&only).copied().collect(),
                    });
                }
            }
        }
    }
    arms.into_iter()
        .filter(|(_, t)| !excluded.contains(t))
        .filter(|(_, t)| forced.as_ref().is_none_or(|f| f.contains(t)))
        .map(|(id, _)| id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: ConstraintRule,
    pub position: usize,
}

/// Rule violations in a served type sequence. A prefix rule only counts as
/// violated once the feed is at least `n` cards long.
pub fn find_violations(served: &[String], rules: &[ConstraintRule]) -> Vec<Violation> {
    let mut out = Vec::new();
    for rule in rules {
        match rule {
            ConstraintRule::MaxConsecutive { arm_type, j } => {
                let mut run = 0;
                for (i, t) in served.iter().enumerate() {
                    run = if t == arm_type { run + 1 } else { 0 };
                    if run > *j {
                        out.push(Violation {
                            rule: rule.clone(),
                            position: i,
                        });
                    }
                }
            }
            ConstraintRule::MinWithinPrefix { arm_type, n } => {
                if served.len() >= *n && !served[..*n].iter().any(|t| t == arm_type) {
                    out.push(Violation {
                        rule: rule.clone(),
                        position: n - 1,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("no eligible arm")]
    NoEligibleArm,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("log sink failed: {0}")]
    Sink(String),
}

impl ServeError {
    pub fn is_model_not_found(&self) -> bool {
        matches!(self, ServeError::Train(TrainError::ModelNotFound(_)))
    }
}

/// Receives every decision and reward the server emits.
pub trait DecisionSink: Send + Sync {
    fn on_decision(&self, rec: &DecisionRecord) -> Result<(), String>;
    fn on_reward(&self, rec: &RewardRecord) -> Result<(), String>;
}

/// Collects records in memory.
#[derive(Default)]
pub struct MemorySink {
    pub decisions: Mutex<Vec<DecisionRecord>>,
    pub rewards: Mutex<Vec<RewardRecord>>,
}

impl DecisionSink for MemorySink {
    fn on_decision(&self, rec: &DecisionRecord) -> Result<(), String> {
        self.decisions.lock().push(rec.clone());
        Ok(())
    }

    fn on_reward(&self, rec: &RewardRecord) -> Result<(), String> {
        self.rewards.lock().push(rec.clone());
        Ok(())
    }
}

/// Appends decisions and rewards to JSONL logs.
pub struct LogSink {
    decisions: Mutex<JsonlAppender>,
    rewards: Mutex<JsonlAppender>,
}

impl LogSink {
    pub fn open(decisions: &Path, rewards: &Path) -> std::io::Result<Self> {
        Ok(Self {
            decisions: Mutex::new(JsonlAppender::open(decisions)?),
            rewards: Mutex::new(JsonlAppender::open(rewards)?),
        })
    }

    pub fn flush(&self) -> std::io::Result<()> {
        self.decisions.lock().flush()?;
        self.rewards.lock().flush()
    }
}

impl DecisionSink for LogSink {
    fn on_decision(&self, rec: &DecisionRecord) -> Result<(), String> {
        self.decisions.lock().append(rec).map_err(|e| e.to_string())
    }

    fn on_reward(&self, rec: &RewardRecord) -> Result<(), String> {
        self.rewards.lock().append(rec).map_err(|e| e.to_string())
    }
}

/// Forwards into the aggregation pipeline.
pub struct PipelineSink(pub Arc<Mutex<PipelineStore>>);

impl DecisionSink for PipelineSink {
    fn on_decision(&self, rec: &DecisionRecord) -> Result<(), String> {
        match self.0.lock().ingest_decision(rec) {
            Ok(()) | Err(PipelineError::DuplicateDecision(_)) => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn on_reward(&self, rec: &RewardRecord) -> Result<(), String> {
        self.0.lock().ingest_reward(rec).map_err(|e| e.to_string())
    }
}

/// Sends each record to several sinks in order.
pub struct Fanout(pub Vec<Arc<dyn DecisionSink>>);

impl DecisionSink for Fanout {
    fn on_decision(&self, rec: &DecisionRecord) -> Result<(), String> {
        self.0.iter().try_for_each(|s| s.on_decision(rec))
    }

    fn on_reward(&self, rec: &RewardRecord) -> Result<(), String> {
        self.0.iter().try_for_each(|s| s.on_reward(rec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeRequest {
    #[serde(default)]
    pub session_id: String,
    pub attributes: RawRequest,
    pub test_id: String,
    pub variant_id: String,
    /// Caller-chosen id; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeResponse {
    pub decision_id: String,
    pub arm_id: ArmId,
    pub scores: BTreeMap<ArmId, ArmScore>,
    pub model_version: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub decision_id: String,
    pub reward: f64,
}

pub struct Server {
    instance_id: String,
    schema: Arc<FeatureSchema>,
    holder: Arc<ModelHolder>,
    catalog: RwLock<ArmCatalog>,
    rules: Vec<ConstraintRule>,
    fallback_unconstrained: bool,
    sink: Arc<dyn DecisionSink>,
    sessions: Mutex<HashMap<String, FeedState>>,
    id_prefix: String,
    next_id: AtomicU64,
}

impl Server {
    pub fn new(
        instance_id: impl Into<String>,
        schema: Arc<FeatureSchema>,
        holder: Arc<ModelHolder>,
        arms: &[ArmSpec],
        rules: Vec<ConstraintRule>,
        sink: Arc<dyn DecisionSink>,
    ) -> Self {
        let instance_id = instance_id.into();
        Self {
            id_prefix: instance_id.clone(),
            instance_id,
            schema,
            holder,
            catalog: RwLock::new(ArmCatalog::new(arms)),
            rules,
            fallback_unconstrained: false,
            sink,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
        }
    }

    /// Serve the unconstrained best (flagged in the log) instead of failing
    /// when rules leave no arm.
    pub fn with_fallback(mut self, fallback_unconstrained: bool) -> Self {
        self.fallback_unconstrained = fallback_unconstrained;
        self
    }

    /// Prefix for generated decision ids.
    pub fn with_id_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.id_prefix = prefix.into();
        self
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn holder(&self) -> &Arc<ModelHolder> {
        &self.holder
    }

    pub fn update_arms(&self, arms: &[ArmSpec]) {
        let mut catalog = self.catalog.write();
        for a in arms {
            catalog.insert(a.clone());
        }
    }

    pub fn feed(&self, session_id: &str) -> FeedState {
        self.sessions
            .lock()
            .get(session_id)
            .cloned()
            .unwrap_or_else(|| FeedState::new(session_id))
    }

    pub fn end_session(&self, session_id: &str) {
        self.sessions.lock().remove(session_id);
    }

    pub fn serve(&self, req: &ServeRequest, now_ms: i64) -> Result<ServeResponse, ServeError> {
        let keyspace = Keyspace::new(&self.instance_id, &req.test_id, &req.variant_id);
        keyspace.validate().map_err(ServeError::InvalidValue)?;
        let snapshot = self.holder.get(&keyspace)?;
        let model = &snapshot.model;
        let x = self.schema.encode(&req.attributes)?;
        let scores = model.score(x.unified())?;

        let feed = if req.session_id.is_empty() {
            FeedState::default()
        } else {
            self.feed(&req.session_id)
        };
        let (eligible, all_eligible) = {
            let catalog = self.catalog.read();
            let typed: Vec<(&ArmId, &str)> = model
                .arm_ids()
                .map(|id| (id, catalog.type_of(id)))
                .collect();
            let eligible = eligible_arms(typed, &self.rules, &feed);
            let all = eligible.len() == model.arm_count();
            (eligible, all)
        };

        let (arm_id, fallback) = if eligible.is_empty() {
            if !self.fallback_unconstrained {
                return Err(ServeError::NoEligibleArm);
            }
            (model.ucb_arm(x.unified(), None)?, true)
        } else {
            (model.ucb_arm(x.unified(), Some(&eligible))?, false)
        };

        let decision_id = match &req.decision_id {
            Some(id) => id.clone(),
            None => format!(
                "{}-{}",
                self.id_prefix,
                self.next_id.fetch_add(1, Ordering::Relaxed)
            ),
        };
        let record = DecisionRecord {
            decision_id: decision_id.clone(),
            instance_id: self.instance_id.clone(),
            test_id: req.test_id.clone(),
            variant_id: req.variant_id.clone(),
            context: x,
            arm_id: arm_id.clone(),
            timestamp: now_ms,
            model_version: Some(model.version()),
            eligible: (!all_eligible).then(|| eligible.iter().cloned().collect()),
            fallback,
        };
        self.sink.on_decision(&record).map_err(ServeError::Sink)?;

        if !req.session_id.is_empty() {
            let arm_type = self.catalog.read().type_of(&arm_id).to_string();
            self.sessions
                .lock()
                .entry(req.session_id.clone())
                .or_insert_with(|| FeedState::new(&req.session_id))
                .push(arm_type);
        }
        Ok(ServeResponse {
            decision_id,
            arm_id,
            scores,
            model_version: model.version(),
            fallback,
        })
    }

    pub fn record_reward(
        &self,
        decision_id: &str,
        reward: f64,
        now_ms: i64,
    ) -> Result<(), ServeError> {
        if !reward.is_finite() {
            return Err(ServeError::InvalidValue(format!(
                "non-finite reward {reward}"
            )));
        }
        self.sink
            .on_reward(&RewardRecord {
                decision_id: decision_id.to_string(),
                reward,
                timestamp: now_ms,
            })
            .map_err(ServeError::Sink)
    }
}
