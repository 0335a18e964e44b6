//! Synthetic worlds with known reward probabilities, and an end-to-end
//! driver pushing their traffic through serving, the pipeline and the
//! trainer.
//!
//! Every request index owns its own random streams (traffic, assignment,
//! exploration, reward), so removing some requests from a run leaves the
//! draws of all the others untouched.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{ArmSpec, StaticArmSource};
use crate::context::{ContextError, ContextKey, ContextVector, FeatureSchema, RawRequest};
use crate::io::{read_jsonl, sha256_hex, write_atomic};
use crate::linalg::dot;
use crate::model::{ArmId, BanditModel, ModelConfig};
use crate::pipeline::{PipelineConfig, PipelineError, PipelineStats, PipelineStore};
use crate::records::{DecisionRecord, Keyspace, RewardRecord};
use crate::replay::{LoggedEvent, ReplayError, ReplayLog};
use crate::serving::{
    ConstraintRule, DecisionSink, Fanout, LogSink, PipelineSink, ServeError, ServeRequest, Server,
};
use crate::training::{ModelHolder, RegistryEntry, TaskQueue, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidSpec(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("unknown arm `{0}`")]
    UnknownArm(ArmId),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldArm {
    pub arm_id: ArmId,
    #[serde(default)]
    pub arm_type: String,
    /// One weight per unified context coordinate.
    pub weights: Vec<f64>,
    /// First round at which the arm source offers this arm.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub available_from_round: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardModel {
    /// `p = clamp(w·x, 0, 1)`
    #[default]
    Linear,
    /// `p = sigmoid(w·x)`; not realizable by a linear model.
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedContext {
    pub weight: f64,
    pub attributes: RawRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Marginal {
    Categorical {
        name: String,
        values: Vec<Value>,
        weights: Vec<f64>,
    },
    Uniform {
        name: String,
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Traffic {
    /// A finite list of full attribute maps.
    Discrete { contexts: Vec<WeightedContext> },
    /// Each feature drawn on its own.
    Independent { features: Vec<Marginal> },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardDelay {
    #[default]
    None,
    Fixed {
        ms: i64,
    },
    Uniform {
        min_ms: i64,
        max_ms: i64,
    },
    Exponential {
        mean_ms: f64,
    },
}

impl RewardDelay {
    fn sample(&self, rng: &mut impl Rng) -> i64 {
        match *self {
            RewardDelay::None => 0,
            RewardDelay::Fixed { ms } => ms,
            RewardDelay::Uniform { min_ms, max_ms } => rng.random_range(min_ms..=max_ms),
            RewardDelay::Exponential { mean_ms } => {
                let u: f64 = rng.random();
                (-mean_ms * (1.0 - u).ln()).round() as i64
            }
        }
    }
}

/// New weights for some arms from `at_round` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepChange {
    pub at_round: u64,
    pub weights: BTreeMap<ArmId, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub schema: FeatureSchema,
    pub arms: Vec<WorldArm>,
    #[serde(default)]
    pub reward_model: RewardModel,
    pub traffic: Traffic,
    #[serde(default)]
    pub reward_delay: RewardDelay,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_change: Option<StepChange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedReward {
    pub reward: f64,
    pub delay_ms: i64,
}

const STREAM_TRAFFIC: u64 = 0;
const STREAM_REWARD: u64 = 1;
const STREAM_ASSIGN: u64 = 2;
const STREAM_EXPLORE: u64 = 3;
const STREAMS: u64 = 4;

/// Independent generator for one (index, purpose) pair.
fn stream_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * STREAMS + purpose);
    rng
}

const MONTE_CARLO_DRAWS: u64 = 200_000;
/// Finite context spaces larger than this fall back to Monte Carlo.
const MAX_ENUMERATED_CONTEXTS: usize = 1 << 20;

impl WorldSpec {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn read(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&fs::read_to_string(path)?)
            .map_err(|e| SimError::InvalidSpec(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        let d = self.schema.dimension();
        if self.arms.is_empty() {
            return bad("world has no arms".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for arm in &self.arms {
            if !seen.insert(&arm.arm_id) {
                return bad(format!("duplicate arm `{}`", arm.arm_id));
            }
            check_weights(&arm.arm_id, &arm.weights, d)?;
        }
        if !self.arms.iter().any(|a| a.available_from_round == 0) {
            return bad("no arm is available from round 0".into());
        }
        if let Some(change) = &self.step_change {
            for (id, w) in &change.weights {
                if self.arm_index(id).is_none() {
                    return bad(format!("step change names unknown arm `{id}`"));
                }
                check_weights(id, w, d)?;
            }
        }
        match &self.traffic {
            Traffic::Discrete { contexts } => {
                if contexts.is_empty() {
                    return bad("discrete traffic has no contexts".into());
                }
                check_probabilities(contexts.iter().map(|c| c.weight))?;
                for c in contexts {
                    self.schema.encode(&c.attributes)?;
                }
            }
            Traffic::Independent { features } => {
                for m in features {
                    match m {
                        Marginal::Categorical {
                            name,
                            values,
                            weights,
                        } => {
                            if values.is_empty() || values.len() != weights.len() {
                                return bad(format!(
                                    "marginal `{name}`: values and weights differ in length"
                                ));
                            }
                            check_probabilities(weights.iter().copied())?;
                        }
                        Marginal::Uniform { name, low, high } => {
                            if !(low.is_finite() && high.is_finite() && low <= high) {
                                return bad(format!("marginal `{name}`: bad range"));
                            }
                        }
                    }
                }
                let names: std::collections::BTreeSet<&str> =
                    features.iter().map(Marginal::name).collect();
                if names.len() != features.len() {
                    return bad("duplicate marginal".into());
                }
                // one draw must encode
                self.schema
                    .encode(&TrafficSampler::new(self)?.sample(&mut stream_rng(0, 0, 0)))?;
            }
        }
        if let RewardDelay::Uniform { min_ms, max_ms } = self.reward_delay {
            if min_ms < 0 || min_ms > max_ms {
                return bad("reward delay range is invalid".into());
            }
        }
        match self.reward_delay {
            RewardDelay::Fixed { ms } if ms < 0 => bad("negative reward delay".into()),
            RewardDelay::Exponential { mean_ms } if !(mean_ms >= 0.0 && mean_ms.is_finite()) => {
                bad("exponential delay mean must be finite and non-negative".into())
            }
            _ => Ok(()),
        }
    }

    fn arm_index(&self, id: &ArmId) -> Option<usize> {
        self.arms.iter().position(|a| &a.arm_id == id)
    }

    pub fn arm_ids(&self) -> Vec<ArmId> {
        self.arms.iter().map(|a| a.arm_id.clone()).collect()
    }

    /// Arms the source offers at `round`.
    pub fn arms_at(&self, round: u64) -> Vec<ArmSpec> {
        self.arms
            .iter()
            .filter(|a| a.available_from_round <= round)
            .map(|a| ArmSpec::new(a.arm_id.as_str(), a.arm_type.as_str()))
            .collect()
    }

    fn weights_at(&self, index: usize, round: u64) -> &[f64] {
        let arm = &self.arms[index];
        match &self.step_change {
            Some(c) if round >= c.at_round => c.weights.get(&arm.arm_id).unwrap_or(&arm.weights),
            _ => &arm.weights,
        }
    }

    /// Ground-truth click probability of `arm` in context `x` at `round`.
    pub fn probability(&self, x: &[f64], arm: &ArmId, round: u64) -> Result<f64, SimError> {
        let index = self
            .arm_index(arm)
            .ok_or_else(|| SimError::UnknownArm(arm.clone()))?;
        let w = self.weights_at(index, round);
        if w.len() != x.len() {
            return Err(SimError::InvalidValue(format!(
                "context has {} coordinates, arm weights {}",
                x.len(),
                w.len()
            )));
        }
        let z = dot(w, x);
        Ok(match self.reward_model {
            RewardModel::Linear => z.clamp(0.0, 1.0),
            RewardModel::Logistic => 1.0 / (1.0 + (-z).exp()),
        })
    }

    /// Encoded contexts with their probabilities, when the space is finite
    /// and small enough to enumerate.
    pub fn context_distribution(&self) -> Result<Option<Vec<(f64, ContextVector)>>, SimError> {
        match &self.traffic {
            Traffic::Discrete { contexts } => {
                let total: f64 = contexts.iter().map(|c| c.weight).sum();
                contexts
                    .iter()
                    .map(|c| Ok((c.weight / total, self.schema.encode(&c.attributes)?)))
                    .collect::<Result<Vec<_>, SimError>>()
                    .map(Some)
            }
            Traffic::Independent { features } => {
                let mut combos: Vec<(f64, RawRequest)> = vec![(1.0, RawRequest::new())];
                for m in features {
                    let Marginal::Categorical {
                        name,
                        values,
                        weights,
                    } = m
                    else {
                        return Ok(None);
                    };
                    if combos.len() * values.len() > MAX_ENUMERATED_CONTEXTS {
                        return Ok(None);
                    }
                    let total: f64 = weights.iter().sum();
                    combos = combos
                        .iter()
                        .flat_map(|(p, raw)| {
                            values.iter().zip(weights).map(move |(v, w)| {
                                let mut raw = raw.clone();
                                raw.insert(name.clone(), v.clone());
                                (p * w / total, raw)
                            })
                        })
                        .collect();
                }
                combos
                    .into_iter()
                    .map(|(p, raw)| Ok((p, self.schema.encode(&raw)?)))
                    .collect::<Result<Vec<_>, SimError>>()
                    .map(Some)
            }
        }
    }
}

fn check_weights(id: &ArmId, w: &[f64], d: usize) -> Result<(), SimError> {
    if w.len() != d {
        return Err(SimError::InvalidSpec(format!(
            "arm `{id}` has {} weights but the schema dimension is {d}",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(SimError::InvalidValue(format!(
            "arm `{id}` has a non-finite weight"
        )));
    }
    Ok(())
}

fn check_probabilities(weights: impl Iterator<Item = f64>) -> Result<(), SimError> {
    let mut total = 0.0;
    for w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(SimError::InvalidValue(format!(
                "traffic weight {w} is not a finite non-negative number"
            )));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(SimError::InvalidValue("traffic weights sum to zero".into()));
    }
    Ok(())
}

impl Marginal {
    fn name(&self) -> &str {
        match self {
            Marginal::Categorical { name, .. } | Marginal::Uniform { name, .. } => name,
        }
    }
}

enum TrafficSampler<'a> {
    Discrete(WeightedIndex<f64>, &'a [WeightedContext]),
    Independent(Vec<(&'a str, FeatureSampler<'a>)>),
}

enum FeatureSampler<'a> {
    Categorical(WeightedIndex<f64>, &'a [Value]),
    Uniform(f64, f64),
}

impl<'a> TrafficSampler<'a> {
    fn new(spec: &'a WorldSpec) -> Result<Self, SimError> {
        let weighted =
            |w: Vec<f64>| WeightedIndex::new(w).map_err(|e| SimError::InvalidValue(e.to_string()));
        Ok(match &spec.traffic {
            Traffic::Discrete { contexts } => TrafficSampler::Discrete(
                weighted(contexts.iter().map(|c| c.weight).collect())?,
                contexts,
            ),
            Traffic::Independent { features } => TrafficSampler::Independent(
                features
                    .iter()
                    .map(|m| {
                        Ok(match m {
                            Marginal::Categorical {
                                name,
                                values,
                                weights,
                            } => (
                                name.as_str(),
                                FeatureSampler::Categorical(weighted(weights.clone())?, values),
                            ),
                            Marginal::Uniform { name, low, high } => {
                                (name.as_str(), FeatureSampler::Uniform(*low, *high))
                            }
                        })
                    })
                    .collect::<Result<_, SimError>>()?,
            ),
        })
    }

    fn sample(&self, rng: &mut impl Rng) -> RawRequest {
        match self {
            TrafficSampler::Discrete(index, contexts) => {
                contexts[index.sample(rng)].attributes.clone()
            }
            TrafficSampler::Independent(features) => features
                .iter()
                .map(|(name, f)| {
                    let v = match f {
                        FeatureSampler::Categorical(index, values) => {
                            values[index.sample(rng)].clone()
                        }
                        FeatureSampler::Uniform(lo, hi) => {
                            Value::from(lo + (hi - lo) * rng.random::<f64>())
                        }
                    };
                    (name.to_string(), v)
                })
                .collect(),
        }
    }
}

/// The request stream of a world: request `i` depends only on the seed and `i`.
pub fn generate_traffic(spec: &WorldSpec, rounds: u64) -> Result<Vec<RawRequest>, SimError> {
    if rounds == 0 {
        return Err(SimError::InvalidValue("rounds must be at least 1".into()));
    }
    let sampler = TrafficSampler::new(spec)?;
    Ok((0..rounds)
        .map(|i| sampler.sample(&mut stream_rng(spec.seed, i, STREAM_TRAFFIC)))
        .collect())
}

/// Bernoulli click at the ground-truth probability, plus its arrival delay.
pub fn realize_reward(
    spec: &WorldSpec,
    context: &ContextVector,
    arm: &ArmId,
    round: u64,
    rng: &mut impl Rng,
) -> Result<RealizedReward, SimError> {
    let p = spec.probability(context.unified(), arm, round)?;
    let reward = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    Ok(RealizedReward {
        reward,
        delay_ms: spec.reward_delay.sample(rng),
    })
}

/// A policy whose value [`oracle_value`] can compute exactly.
#[derive(Debug, Clone)]
pub enum OraclePolicy {
    Arm(ArmId),
    /// Uniform over the arms available from round 0.
    Uniform,
    /// The best arm of each context.
    Best,
    Table {
        table: HashMap<ContextKey, ArmId>,
        default: ArmId,
    },
}

/// Expected reward per round of `policy` under the initial (round 0) world.
/// Exact over finite context spaces, Monte Carlo otherwise.
pub fn oracle_value(spec: &WorldSpec, policy: &OraclePolicy) -> Result<f64, SimError> {
    spec.validate()?;
    let value_at = |x: &ContextVector| -> Result<f64, SimError> {
        let arms = spec.arms.iter().filter(|a| a.available_from_round == 0);
        match policy {
            OraclePolicy::Arm(a) => spec.probability(x.unified(), a, 0),
            OraclePolicy::Table { table, default } => {
                spec.probability(x.unified(), table.get(&x.key()).unwrap_or(default), 0)
            }
            OraclePolicy::Uniform => {
                let ps = arms
                    .map(|a| spec.probability(x.unified(), &a.arm_id, 0))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ps.iter().sum::<f64>() / ps.len() as f64)
            }
            OraclePolicy::Best => arms
                .map(|a| spec.probability(x.unified(), &a.arm_id, 0))
                .try_fold(f64::NEG_INFINITY, |m, p| p.map(|p| m.max(p))),
        }
    };
    if let Some(dist) = spec.context_distribution()? {
        return dist
            .iter()
            .try_fold(0.0, |acc, (p, x)| Ok(acc + p * value_at(x)?));
    }
    let sampler = TrafficSampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0ac1e_u64);
    let mut total = 0.0;
    for _ in 0..MONTE_CARLO_DRAWS {
        total += value_at(&spec.schema.encode(&sampler.sample(&mut rng))?)?;
    }
    Ok(total / MONTE_CARLO_DRAWS as f64)
}

/// Uniform-random logging: every request is served a uniformly drawn arm
/// from those available at round 0.
pub fn uniform_log(
    spec: &WorldSpec,
    events: u64,
    ms_per_round: i64,
) -> Result<ReplayLog, SimError> {
    let arms: Vec<ArmId> = spec.arms_at(0).into_iter().map(|a| a.arm_id).collect();
    let traffic = generate_traffic(spec, events)?;
    let mut out = Vec::with_capacity(traffic.len());
    for (i, raw) in traffic.iter().enumerate() {
        let i = i as u64;
        let context = spec.schema.encode(raw)?;
        let arm =
            arms[stream_rng(spec.seed, i, STREAM_EXPLORE).random_range(0..arms.len())].clone();
        let r = realize_reward(
            spec,
            &context,
            &arm,
            i,
            &mut stream_rng(spec.seed, i, STREAM_REWARD),
        )?;
        out.push(LoggedEvent {
            timestamp: i as i64 * ms_per_round,
            context,
            arm_id: arm,
            reward: r.reward,
        });
    }
    Ok(ReplayLog::new(arms, out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub test_id: String,
    pub variant_id: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl VariantSpec {
    pub fn new(test_id: impl Into<String>, variant_id: impl Into<String>) -> Self {
        Self {
            test_id: test_id.into(),
            variant_id: variant_id.into(),
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub instance_id: String,
    pub rounds: u64,
    pub ms_per_round: i64,
    /// Period of the close-window + training cycle.
    pub window_ms: i64,
    pub lambda: f64,
    pub alpha: f64,
    pub variants: Vec<VariantSpec>,
    /// Variant ids whose requests are discarded before serving.
    pub dropped_variants: Vec<String>,
    /// Share of requests served uniformly at random into the replay log
    /// instead of by the bandit.
    pub explore_fraction: f64,
    /// Consecutive requests per feed session.
    pub session_length: u64,
    pub rules: Vec<ConstraintRule>,
    pub fallback_unconstrained: bool,
    /// Rounds between regret CSV rows.
    pub regret_every: u64,
    /// Overrides the world's seed.
    pub seed: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            instance_id: "sim".into(),
            rounds: 10_000,
            ms_per_round: 1000,
            window_ms: 100_000,
            lambda: 1.0,
            alpha: 1.0,
            variants: vec![VariantSpec::new("default", "control")],
            dropped_variants: Vec::new(),
            explore_fraction: 0.0,
            session_length: 1,
            rules: Vec::new(),
            fallback_unconstrained: false,
            regret_every: 100,
            seed: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidValue(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.ms_per_round <= 0 || self.window_ms <= 0 {
            return bad("ms_per_round and window_ms must be positive");
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required");
        }
        check_probabilities(self.variants.iter().map(|v| v.weight))?;
        for v in &self.variants {
            Keyspace::new(&self.instance_id, &v.test_id, &v.variant_id)
                .validate()
                .map_err(SimError::InvalidValue)?;
        }
        if !(0.0..=1.0).contains(&self.explore_fraction) {
            return bad("explore_fraction must be in [0, 1]");
        }
        if self.session_length == 0 || self.regret_every == 0 {
            return bad("session_length and regret_every must be positive");
        }
        Ok(())
    }

    pub fn keyspaces(&self) -> Vec<Keyspace> {
        self.variants
            .iter()
            .map(|v| Keyspace::new(&self.instance_id, &v.test_id, &v.variant_id))
            .collect()
    }
}

/// Expected-reward accounting over bandit-served rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub served: u64,
    pub realized_reward: f64,
    /// Sum of the ground-truth probability of each served arm.
    pub expected_reward: f64,
    /// Same for the best arm the model could have picked.
    pub oracle_reward: f64,
    /// Same for a uniform pick among the model's arms.
    pub uniform_reward: f64,
}

impl Tally {
    fn write_row(&self, out: &mut String, round: u64) {
        let _ = writeln!(
            out,
            "{round},{},{},{},{},{}",
            self.served, self.realized_reward, self.expected_reward, self.oracle_reward, self.uniform_reward
        );
    }

    fn add(&mut self, realized: f64, expected: f64, oracle: f64, uniform: f64) {
        self.served += 1;
        self.realized_reward += realized;
        self.expected_reward += expected;
        self.oracle_reward += oracle;
        self.uniform_reward += uniform;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub model_version: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub rounds: u64,
    pub ms_per_round: i64,
    pub regret_every: u64,
    pub explored: u64,
    /// Requests rejected because no arm was eligible.
    pub unserved: u64,
    pub total: Tally,
    pub variants: BTreeMap<String, Tally>,
    pub snapshots: BTreeMap<String, SnapshotSummary>,
    pub pipeline: PipelineStats,
    pub cycles: u64,
}

/// Output layout of a simulation run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn decisions(&self) -> PathBuf {
        self.root.join("logs/decisions.jsonl")
    }
    pub fn rewards(&self) -> PathBuf {
        self.root.join("logs/rewards.jsonl")
    }
    pub fn replay_log(&self) -> PathBuf {
        self.root.join("logs/replay.jsonl")
    }
    pub fn journal(&self) -> PathBuf {
        self.root.join("pipeline/journal.jsonl")
    }
    pub fn aggregates(&self) -> PathBuf {
        self.root.join("aggregates")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn regret(&self) -> PathBuf {
        self.root.join("regret.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

struct PendingReward {
    decision_id: String,
    reward: f64,
}

/// Serving, pipeline and trainer wired together on one clock.
struct Harness<'a> {
    spec: &'a WorldSpec,
    config: &'a SimConfig,
    store: Arc<Mutex<PipelineStore>>,
    server: Server,
    trainer: Trainer,
    queue: TaskQueue,
    source: StaticArmSource,
    registry: Vec<RegistryEntry>,
    log_sink: Arc<LogSink>,
    next_cycle: i64,
    cycles: u64,
}

impl Harness<'_> {
    fn cycle(&mut self, now: i64) -> Result<(), SimError> {
        let keyspaces = self.config.keyspaces();
        {
            let mut store = self.store.lock();
            store.expire_orphans(now)?;
            store.close_all(&keyspaces)?;
        }
        let round = (now / self.config.ms_per_round) as u64;
        self.source
            .set(self.config.instance_id.clone(), self.spec.arms_at(round));
        let report = self.queue.enqueue_cycle(&self.registry, &self.source, now);
        for (_, arms) in &report.arms {
            self.server.update_arms(arms);
        }
        for (_, result) in self.trainer.drain(&self.queue) {
            result?;
        }
        self.cycles += 1;
        Ok(())
    }

    /// Runs every cycle scheduled at or before `t`.
    fn advance_to(&mut self, t: i64) -> Result<(), SimError> {
        while self.next_cycle <= t {
            let now = self.next_cycle;
            self.cycle(now)?;
            self.next_cycle += self.config.window_ms;
        }
        Ok(())
    }
}

pub const REGRET_HEADER: &str =
    "round,served,cumulative_reward,cumulative_expected,cumulative_oracle,cumulative_uniform\n";

/// Runs a world end to end and writes logs, snapshots, `regret.csv` and
/// `summary.json` under `out`, which must be empty or absent.
pub fn run_simulation(
    spec: &WorldSpec,
    config: &SimConfig,
    out: &Path,
) -> Result<SimSummary, SimError> {
    spec.validate()?;
    config.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(SimError::InvalidValue(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    let seed = config.seed.unwrap_or(spec.seed);
    let layout = RunLayout::new(out);
    fs::create_dir_all(layout.root.join("logs"))?;
    fs::create_dir_all(layout.root.join("pipeline"))?;

    let store = Arc::new(Mutex::new(PipelineStore::open(
        &layout.journal(),
        &layout.aggregates(),
        PipelineConfig::default(),
    )?));
    let log_sink = Arc::new(LogSink::open(&layout.decisions(), &layout.rewards())?);
    let sink: Arc<dyn DecisionSink> = Arc::new(Fanout(vec![
        Arc::new(PipelineSink(Arc::clone(&store))),
        Arc::clone(&log_sink) as Arc<dyn DecisionSink>,
    ]));
    let holder = Arc::new(ModelHolder::new(layout.models()));
    let model_config = ModelConfig::new(spec.schema.dimension())
        .with_lambda(config.lambda)
        .with_alpha(config.alpha);
    model_config
        .validate()
        .map_err(|e| SimError::InvalidValue(e.to_string()))?;
    let schema = Arc::new(spec.schema.clone());
    let server = Server::new(
        config.instance_id.clone(),
        schema,
        Arc::clone(&holder),
        &spec.arms_at(0),
        config.rules.clone(),
        sink,
    )
    .with_fallback(config.fallback_unconstrained);
    let trainer = Trainer::new(
        holder,
        layout.aggregates(),
        HashMap::from([(config.instance_id.clone(), model_config)]),
    );
    let mut h = Harness {
        spec,
        config,
        store,
        server,
        trainer,
        queue: TaskQueue::new(),
        source: StaticArmSource::new(),
        registry: vec![RegistryEntry {
            instance_id: config.instance_id.clone(),
            keyspaces: config.keyspaces(),
        }],
        log_sink,
        next_cycle: 0,
        cycles: 0,
    };

    let sampler = TrafficSampler::new(spec)?;
    let assign = WeightedIndex::new(config.variants.iter().map(|v| v.weight))
        .map_err(|e| SimError::InvalidValue(e.to_string()))?;
    let explore_arms: Vec<ArmId> = spec.arms_at(0).into_iter().map(|a| a.arm_id).collect();
    let mut replay_events = Vec::new();
    let mut pending: BinaryHeap<Reverse<(i64, u64)>> = BinaryHeap::new();
    let mut payloads: HashMap<u64, PendingReward> = HashMap::new();
    let mut total = Tally::default();
    let mut variants: BTreeMap<String, Tally> = BTreeMap::new();
    let (mut explored, mut unserved) = (0u64, 0u64);
    let mut regret = String::from(REGRET_HEADER);

    for i in 0..config.rounds {
        let t = i as i64 * config.ms_per_round;
        deliver(&mut h, &mut pending, &mut payloads, t)?;
        h.advance_to(t)?;

        let session = i / config.session_length;
        let variant =
            &config.variants[assign.sample(&mut stream_rng(seed, session, STREAM_ASSIGN))];
        let raw = sampler.sample(&mut stream_rng(seed, i, STREAM_TRAFFIC));
        let last_in_session = (i + 1) % config.session_length == 0;
        let session_id = if config.session_length > 1 {
            format!("s{session}")
        } else {
            String::new()
        };

        if !config.dropped_variants.contains(&variant.variant_id) {
            let mut reward_rng = stream_rng(seed, i, STREAM_REWARD);
            let mut explore_rng = stream_rng(seed, i, STREAM_EXPLORE);
            if config.explore_fraction > 0.0
                && explore_rng.random::<f64>() < config.explore_fraction
            {
                let context = spec.schema.encode(&raw)?;
                let arm = explore_arms[explore_rng.random_range(0..explore_arms.len())].clone();
                let r = realize_reward(spec, &context, &arm, i, &mut reward_rng)?;
                replay_events.push(LoggedEvent {
                    timestamp: t,
                    context,
                    arm_id: arm,
                    reward: r.reward,
                });
                explored += 1;
            } else {
                let request = ServeRequest {
                    session_id: session_id.clone(),
                    attributes: raw,
                    test_id: variant.test_id.clone(),
                    variant_id: variant.variant_id.clone(),
                    decision_id: Some(format!("d{i}")),
                };
                match h.server.serve(&request, t) {
                    Ok(resp) => {
                        let context = spec.schema.encode(&request.attributes)?;
                        let x = context.unified();
                        let r = realize_reward(spec, &context, &resp.arm_id, i, &mut reward_rng)?;
                        let expected = spec.probability(x, &resp.arm_id, i)?;
                        let ps = resp
                            .scores
                            .keys()
                            .map(|a| spec.probability(x, a, i))
                            .collect::<Result<Vec<_>, _>>()?;
                        let oracle = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let uniform = ps.iter().sum::<f64>() / ps.len() as f64;
                        total.add(r.reward, expected, oracle, uniform);
                        variants
                            .entry(format!("{}/{}", variant.test_id, variant.variant_id))
                            .or_default()
                            .add(r.reward, expected, oracle, uniform);
                        pending.push(Reverse((t + r.delay_ms, i)));
                        payloads.insert(
                            i,
                            PendingReward {
                                decision_id: resp.decision_id,
                                reward: r.reward,
                            },
                        );
                    }
                    Err(ServeError::NoEligibleArm) => unserved += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        if last_in_session && !session_id.is_empty() {
            h.server.end_session(&session_id);
        }
        if (i + 1) % config.regret_every == 0 || i + 1 == config.rounds {
            total.write_row(&mut regret, i + 1);
        }
    }

    // drain late rewards on the cycle schedule, then close and train once more
    let end = config.rounds as i64 * config.ms_per_round;
    let last_arrival = pending
        .iter()
        .map(|Reverse((at, _))| *at)
        .max()
        .unwrap_or(end);
    deliver(&mut h, &mut pending, &mut payloads, last_arrival.max(end))?;
    let final_cycle = h.next_cycle;
    h.advance_to(final_cycle)?;

    h.log_sink.flush()?;
    h.store.lock().flush()?;
    if explored > 0 {
        ReplayLog::new(explore_arms, replay_events)?.write(&layout.replay_log())?;
    }
    write_atomic(&layout.regret(), regret.as_bytes())?;

    let mut snapshots = BTreeMap::new();
    for k in config.keyspaces() {
        let holder = h.trainer.holder();
        let version = holder.current_version(&k)?.unwrap_or(0);
        snapshots.insert(
            k.to_string(),
            SnapshotSummary {
                model_version: version,
                sha256: sha256_hex(&holder.current_bytes(&k)?),
            },
        );
    }
    let summary = SimSummary {
        seed,
        rounds: config.rounds,
        ms_per_round: config.ms_per_round,
        regret_every: config.regret_every,
        explored,
        unserved,
        total,
        variants,
        snapshots,
        pipeline: h.store.lock().stats().clone(),
        cycles: h.cycles,
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write_atomic(&layout.summary(), text.as_bytes())?;
    Ok(summary)
}

/// Rebuilds a finished run's `regret.csv` from its decision and reward
/// logs, the world, and the snapshot each decision was served from.
pub fn recount_regret(spec: &WorldSpec, out: &Path) -> Result<String, SimError> {
    let layout = RunLayout::new(out);
    let summary: SimSummary = serde_json::from_slice(&fs::read(layout.summary())?)
        .map_err(|e| SimError::InvalidValue(format!("{}: {e}", layout.summary().display())))?;
    let decisions: Vec<DecisionRecord> = read_jsonl(&layout.decisions())?;
    let mut rewards: HashMap<String, f64> = HashMap::new();
    for r in read_jsonl::<RewardRecord>(&layout.rewards())? {
        *rewards.entry(r.decision_id).or_default() += r.reward;
    }
    let holder = ModelHolder::new(layout.models());
    let mut histories: HashMap<Keyspace, BTreeMap<u64, BanditModel>> = HashMap::new();

    let mut csv = String::from(REGRET_HEADER);
    let mut tally = Tally::default();
    let mut next = decisions.iter().peekable();
    for round in 0..summary.rounds {
        let end = (round as i64 + 1) * summary.ms_per_round;
        while let Some(d) = next.next_if(|d| d.timestamp < end) {
            let keyspace = d.keyspace();
            if !histories.contains_key(&keyspace) {
                histories.insert(keyspace.clone(), holder.history(&keyspace)?);
            }
            let model = d
                .model_version
                .and_then(|v| histories[&keyspace].get(&v))
                .ok_or_else(|| SimError::InvalidValue(format!("decision {} has no snapshot", d.decision_id)))?;
            let x = d.context.unified();
            let i = (d.timestamp / summary.ms_per_round) as u64;
            let ps = model
                .arm_ids()
                .map(|a| spec.probability(x, a, i))
                .collect::<Result<Vec<_>, _>>()?;
            tally.add(
                rewards.get(&d.decision_id).copied().unwrap_or(0.0),
                spec.probability(x, &d.arm_id, i)?,
                ps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ps.iter().sum::<f64>() / ps.len() as f64,
            );
        }
        if (round + 1) % summary.regret_every == 0 || round + 1 == summary.rounds {
            tally.write_row(&mut csv, round + 1);
        }
    }
    Ok(csv)
}

/// Delivers every pending reward due at or before `t`, running the cycles
/// scheduled in between first.
fn deliver(
    h: &mut Harness<'_>,
    pending: &mut BinaryHeap<Reverse<(i64, u64)>>,
    payloads: &mut HashMap<u64, PendingReward>,
    t: i64,
) -> Result<(), SimError> {
    while let Some(&Reverse((at, i))) = pending.peek() {
        if at > t {
            break;
        }
        pending.pop();
        h.advance_to(at - 1)?;
        let p = payloads.remove(&i).expect("payload for pending reward");
        h.server.record_reward(&p.decision_id, p.reward, at)?;
    }
    Ok(())
}
