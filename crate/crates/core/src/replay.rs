//! Offline policy evaluation over uniformly-random logged pulls.
//!
//! Classic replay credits a logged reward whenever the evaluated policy picks
//! the logged arm. Windowed replay instead samples a reward for the chosen
//! arm from logged pulls in the same context within `(t - t1, t + t2)`,
//! stepping the policy along the log's own event times.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::context::{ContextKey, ContextVector, SCHEMA_VERSION};
use crate::exec::Execution;
use crate::io::write_atomic;
use crate::model::{ArmId, BanditModel, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("no logged event matched the policy ({total} steps)")]
    NoMatches { total: u64 },
    #[error("every lambda in the grid produced no matches")]
    TuningInconclusive,
    #[error("invalid log: {0}")]
    InvalidLog(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("policy error: {0}")]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// First record of a replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    /// Number of arms the logging policy drew from uniformly.
    pub k: usize,
    pub arm_set: Vec<ArmId>,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub timestamp: i64,
    pub context: ContextVector,
    pub arm_id: ArmId,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLog {
    pub header: LogHeader,
    pub events: Vec<LoggedEvent>,
}

impl ReplayLog {
    pub fn new(arm_set: Vec<ArmId>, events: Vec<LoggedEvent>) -> Result<Self, ReplayError> {
        let log = Self {
            header: LogHeader {
                k: arm_set.len(),
                arm_set,
                schema_version: SCHEMA_VERSION,
            },
            events,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: String| Err(ReplayError::InvalidLog(m));
        let arms: BTreeSet<&ArmId> = self.header.arm_set.iter().collect();
        if arms.len() != self.header.arm_set.len() {
            return bad("duplicate arm in arm_set".into());
        }
        if self.header.k == 0 || self.header.k != arms.len() {
            return bad(format!(
                "declared k = {} but arm_set has {} arms",
                self.header.k,
                arms.len()
            ));
        }
        let dim = self.events.first().map(|e| e.context.dimension());
        for (i, e) in self.events.iter().enumerate() {
            if !arms.contains(&e.arm_id) {
                return bad(format!("event {i}: arm `{}` not in arm_set", e.arm_id));
            }
            if Some(e.context.dimension()) != dim {
                return bad(format!("event {i}: context dimension differs"));
            }
            if !e.reward.is_finite() {
                return bad(format!("event {i}: non-finite reward"));
            }
            if i > 0 && e.timestamp < self.events[i - 1].timestamp {
                return bad(format!("event {i}: timestamps out of order"));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> Option<usize> {
        self.events.first().map(|e| e.context.dimension())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ReplayError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| ReplayError::InvalidLog("empty log, header missing".into()))?;
        let header: LogHeader = serde_json::from_str(first)
            .map_err(|e| ReplayError::InvalidLog(format!("line 1: bad header: {e}")))?;
        let events = lines
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| ReplayError::InvalidLog(format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<LoggedEvent>, _>>()?;
        let log = Self { header, events };
        log.validate()?;
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self, ReplayError> {
        let text = fs::read_to_string(path)?;
        Self::from_jsonl(&text).map_err(|e| match e {
            ReplayError::InvalidLog(m) => {
                ReplayError::InvalidLog(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// A stateful policy under evaluation.
pub trait ReplayPolicy {
    fn choose(&mut self, context: &ContextVector) -> Result<ArmId, ReplayError>;
    /// Called once per credited reward.
    fn learn(
        &mut self,
        context: &ContextVector,
        arm: &ArmId,
        reward: f64,
    ) -> Result<(), ReplayError>;
}

/// Always the same arm; never learns.
#[derive(Debug, Clone)]
pub struct FixedArmPolicy(pub ArmId);

impl ReplayPolicy for FixedArmPolicy {
    fn choose(&mut self, _: &ContextVector) -> Result<ArmId, ReplayError> {
        Ok(self.0.clone())
    }

    fn learn(&mut self, _: &ContextVector, _: &ArmId, _: f64) -> Result<(), ReplayError> {
        Ok(())
    }
}

/// A fixed arm per context, with a default for unlisted contexts.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    pub table: HashMap<ContextKey, ArmId>,
    pub default: ArmId,
}

impl ReplayPolicy for TablePolicy {
    fn choose(&mut self, context: &ContextVector) -> Result<ArmId, ReplayError> {
        Ok(self
            .table
            .get(&context.key())
            .unwrap_or(&self.default)
            .clone())
    }

    fn learn(&mut self, _: &ContextVector, _: &ArmId, _: f64) -> Result<(), ReplayError> {
        Ok(())
    }
}

/// LinUCB learning one pull at a time.
#[derive(Debug, Clone)]
pub struct LinUcbPolicy {
    model: BanditModel,
}

impl LinUcbPolicy {
    pub fn new(config: ModelConfig, arms: &[ArmId]) -> Result<Self, ReplayError> {
        let mut model = BanditModel::new("replay", config)?;
        for a in arms {
            model = model.add_arm(a.clone())?;
        }
        Ok(Self { model })
    }

    pub fn model(&self) -> &BanditModel {
        &self.model
    }
}

impl ReplayPolicy for LinUcbPolicy {
    fn choose(&mut self, context: &ContextVector) -> Result<ArmId, ReplayError> {
        Ok(self.model.ucb_arm(context.unified(), None)?)
    }

    fn learn(
        &mut self,
        context: &ContextVector,
        arm: &ArmId,
        reward: f64,
    ) -> Result<(), ReplayError> {
        self.model = self.model.observe(context.unified(), arm, reward)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Classic,
    Windowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayParams {
    pub mode: ReplayMode,
    /// Look-back in ms; may be infinite.
    #[serde(with = "duration_ms")]
    pub t1_ms: f64,
    /// Look-ahead in ms; may be infinite.
    #[serde(with = "duration_ms")]
    pub t2_ms: f64,
    pub with_repetitions: bool,
    pub seed: u64,
}

impl ReplayParams {
    pub fn classic() -> Self {
        Self {
            mode: ReplayMode::Classic,
            t1_ms: 0.0,
            t2_ms: 0.0,
            with_repetitions: true,
            seed: 0,
        }
    }

    pub fn windowed(t1_ms: f64, t2_ms: f64) -> Self {
        Self {
            mode: ReplayMode::Windowed,
            t1_ms,
            t2_ms,
            ..Self::classic()
        }
    }

    pub fn without_repetitions(mut self) -> Self {
        self.with_repetitions = false;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if !(self.t1_ms >= 0.0 && self.t2_ms >= 0.0) {
            return Err(ReplayError::InvalidParams(
                "t1 and t2 must be non-negative".into(),
            ));
        }
        if self.mode == ReplayMode::Windowed && self.t1_ms + self.t2_ms <= 0.0 {
            return Err(ReplayError::InvalidParams(
                "windowed replay needs t1 + t2 > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Durations as JSON numbers, with `"inf"` for an unbounded window.
mod duration_ms {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad duration `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub params: ReplayParams,
    pub matched: u64,
    pub total: u64,
    pub reward_sum: f64,
    pub mean_reward: f64,
    /// Windowed steps that found no candidate reward.
    pub exhausted_steps: u64,
}

impl ReplayReport {
    pub fn match_rate(&self) -> f64 {
        self.matched as f64 / self.total as f64
    }
}

fn finish(
    params: ReplayParams,
    matched: u64,
    total: u64,
    reward_sum: f64,
    exhausted: u64,
) -> Result<ReplayReport, ReplayError> {
    if matched == 0 {
        return Err(ReplayError::NoMatches { total });
    }
    Ok(ReplayReport {
        params,
        matched,
        total,
        reward_sum,
        mean_reward: reward_sum / matched as f64,
        exhausted_steps: exhausted,
    })
}

pub fn replay(
    log: &ReplayLog,
    policy: &mut dyn ReplayPolicy,
    params: &ReplayParams,
) -> Result<ReplayReport, ReplayError> {
    match params.mode {
        ReplayMode::Classic => replay_classic(log, policy).map(|r| ReplayReport {
            params: *params,
            ..r
        }),
        ReplayMode::Windowed => replay_windowed(log, policy, params),
    }
}

pub fn replay_classic(
    log: &ReplayLog,
    policy: &mut dyn ReplayPolicy,
) -> Result<ReplayReport, ReplayError> {
    let (mut matched, mut reward_sum) = (0u64, 0.0);
    for e in &log.events {
        if policy.choose(&e.context)? == e.arm_id {
            reward_sum += e.reward;
            matched += 1;
            policy.learn(&e.context, &e.arm_id, e.reward)?;
        }
    }
    finish(
        ReplayParams::classic(),
        matched,
        log.events.len() as u64,
        reward_sum,
        0,
    )
}

pub fn replay_windowed(
    log: &ReplayLog,
    policy: &mut dyn ReplayPolicy,
    params: &ReplayParams,
) -> Result<ReplayReport, ReplayError> {
    params.validate()?;
    if params.mode != ReplayMode::Windowed {
        return Err(ReplayError::InvalidParams(
            "windowed replay called in classic mode".into(),
        ));
    }
    let mut cells: HashMap<(ArmId, ContextKey), Cell> = HashMap::new();
    for (i, e) in log.events.iter().enumerate() {
        cells
            .entry((e.arm_id.clone(), e.context.key()))
            .or_default()
            .members
            .push((e.timestamp, i));
    }
    if !params.with_repetitions {
        for cell in cells.values_mut() {
            cell.unconsumed = Some(Fenwick::ones(cell.members.len()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (mut matched, mut exhausted, mut reward_sum) = (0u64, 0u64, 0.0);
    for step in &log.events {
        let arm = policy.choose(&step.context)?;
        let t = step.timestamp as f64;
        let sampled = cells
            .get_mut(&(arm.clone(), step.context.key()))
            .and_then(|cell| cell.sample(t - params.t1_ms, t + params.t2_ms, &mut rng));
        match sampled {
            Some(i) => {
                let reward = log.events[i].reward;
                reward_sum += reward;
                matched += 1;
                policy.learn(&step.context, &arm, reward)?;
            }
            None => exhausted += 1,
        }
    }
    finish(
        *params,
        matched,
        log.events.len() as u64,
        reward_sum,
        exhausted,
    )
}

/// Logged pulls of one (arm, context), in time order.
#[derive(Default)]
struct Cell {
    members: Vec<(i64, usize)>,
    unconsumed: Option<Fenwick>,
}

impl Cell {
    /// Uniform draw among members with timestamp in the open interval
    /// `(lo, hi)`; consumes it when tracking consumption.
    fn sample(&mut self, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Option<usize> {
        let start = self.members.partition_point(|(ts, _)| (*ts as f64) <= lo);
        let end = self.members.partition_point(|(ts, _)| (*ts as f64) < hi);
        if start >= end {
            return None;
        }
        let pos = match &mut self.unconsumed {
            None => rng.random_range(start..end),
            Some(tree) => {
                let before = tree.prefix(start);
                let available = tree.prefix(end) - before;
                if available == 0 {
                    return None;
                }
                let pos = tree.find_kth(before + rng.random_range(0..available));
                tree.remove(pos);
                pos
            }
        };
        Some(self.members[pos].1)
    }
}

/// Fenwick tree over 0/1 flags.
struct Fenwick {
    tree: Vec<usize>,
}

impl Fenwick {
    fn ones(n: usize) -> Self {
        let mut tree = vec![0; n + 1];
        for i in 1..=n {
            tree[i] += 1;
            let j = i + (i & i.wrapping_neg());
            if j <= n {
                tree[j] += tree[i];
            }
        }
        Self { tree }
    }

    /// Number of set flags in `[0, end)`.
    fn prefix(&self, end: usize) -> usize {
        let (mut i, mut sum) = (end, 0);
        while i > 0 {
            sum += self.tree[i];
            i &= i - 1;
        }
        sum
    }

    fn remove(&mut self, pos: usize) {
        let mut i = pos + 1;
        while i < self.tree.len() {
            self.tree[i] -= 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Position of the set flag with zero-based rank `k`.
    fn find_kth(&self, k: usize) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut rem = k;
        let mut step = n.checked_ilog2().map_or(0, |b| 1usize << b);
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaResult {
    pub lambda: f64,
    /// `None` when the run had no matches.
    pub mean_reward: Option<f64>,
    pub matched: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best_lambda: f64,
    pub per_lambda: Vec<LambdaResult>,
    pub params: ReplayParams,
}

/// Replays a LinUCB policy per grid point on the same log and seed; the best
/// lambda has the highest mean reward, ties to the smaller lambda.
pub fn tune_lambda(
    log: &ReplayLog,
    grid: &[f64],
    alpha: f64,
    params: &ReplayParams,
    exec: Execution,
) -> Result<TuneReport, ReplayError> {
    if grid.is_empty() {
        return Err(ReplayError::InvalidParams("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(ReplayError::InvalidParams(format!(
            "lambda {l} is not a positive real"
        )));
    }
    params.validate()?;
    let dimension = log
        .dimension()
        .ok_or_else(|| ReplayError::InvalidLog("log has no events".into()))?;

    let runs = exec.map(grid, |&lambda| -> Result<LambdaResult, ReplayError> {
        let config = ModelConfig::new(dimension)
            .with_lambda(lambda)
            .with_alpha(alpha);
        let mut policy = LinUcbPolicy::new(config, &log.header.arm_set)?;
        match replay(log, &mut policy, params) {
            Ok(r) => Ok(LambdaResult {
                lambda,
                mean_reward: Some(r.mean_reward),
                matched: r.matched,
            }),
            Err(ReplayError::NoMatches { .. }) => Ok(LambdaResult {
                lambda,
                mean_reward: None,
                matched: 0,
            }),
            Err(e) => Err(e),
        }
    });
    let mut per_lambda = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    per_lambda.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));

    let mut best: Option<(f64, f64)> = None;
    for r in &per_lambda {
        if let Some(m) = r.mean_reward {
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((r.lambda, m));
            }
        }
    }
    let (best_lambda, _) = best.ok_or(ReplayError::TuningInconclusive)?;
    Ok(TuneReport {
        best_lambda,
        per_lambda,
        params: *params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};

    fn ctx(bits: &[f64]) -> ContextVector {
        ContextVector::from_unified(bits.to_vec())
    }

    fn arms(k: usize) -> Vec<ArmId> {
        (0..k).map(|i| ArmId::new(format!("a{i}"))).collect()
    }

    /// Uniform-k log over two contexts with reward = 1 for arm a0 in context 0.
    fn uniform_log(k: usize, n: usize, seed: u64) -> ReplayLog {
        let arm_set = arms(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events = (0..n)
            .map(|i| {
                let c = rng.random_range(0..2usize);
                let a = rng.random_range(0..k);
                let p = if a == 0 { 0.7 } else { 0.3 };
                LoggedEvent {
                    timestamp: i as i64 * 10,
                    context: ctx(if c == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] }),
                    arm_id: arm_set[a].clone(),
                    reward: if rng.random::<f64>() < p { 1.0 } else { 0.0 },
                }
            })
            .collect();
        ReplayLog::new(arm_set, events).unwrap()
    }

    /// Test-only cheat: picks whatever the log picked at this step.
    struct Logged<'a> {
        log: &'a ReplayLog,
        step: usize,
    }

    impl ReplayPolicy for Logged<'_> {
        fn choose(&mut self, _: &ContextVector) -> Result<ArmId, ReplayError> {
            let arm = self.log.events[self.step].arm_id.clone();
            self.step += 1;
            Ok(arm)
        }

        fn learn(&mut self, _: &ContextVector, _: &ArmId, _: f64) -> Result<(), ReplayError> {
            Ok(())
        }
    }

    #[test]
    fn logged_arm_policy_matches_everything() {
        let log = uniform_log(4, 500, 1);
        let r = replay_classic(&log, &mut Logged { log: &log, step: 0 }).unwrap();
        assert_eq!(r.matched, r.total);
        let sum: f64 = log.events.iter().map(|e| e.reward).sum();
        assert_eq!(r.reward_sum, sum);
    }

    #[test]
    fn fixed_arm_matches_at_one_over_k() {
        for k in [2usize, 5, 10] {
            let n = 10_000;
            let log = uniform_log(k, n, k as u64);
            let r = replay_classic(&log, &mut FixedArmPolicy(ArmId::new("a1"))).unwrap();
            let p = 1.0 / k as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (r.matched as f64 - n as f64 * p).abs() <= 3.0 * sigma,
                "k={k}: {}",
                r.matched
            );
        }
    }

    #[test]
    fn degenerate_window_reduces_to_classic() {
        let log = uniform_log(3, 2000, 7);
        let classic = replay_classic(&log, &mut Logged { log: &log, step: 0 }).unwrap();
        let params = ReplayParams::windowed(0.5, 0.5);
        let windowed = replay_windowed(&log, &mut Logged { log: &log, step: 0 }, &params).unwrap();
        assert_eq!(
            (
                classic.matched,
                classic.total,
                classic.reward_sum,
                classic.mean_reward
            ),
            (
                windowed.matched,
                windowed.total,
                windowed.reward_sum,
                windowed.mean_reward
            )
        );
        assert_eq!(windowed.exhausted_steps, 0);

        // also for a policy that only sometimes agrees with the log
        let c = replay_classic(&log, &mut FixedArmPolicy(ArmId::new("a2"))).unwrap();
        let w = replay_windowed(&log, &mut FixedArmPolicy(ArmId::new("a2")), &params).unwrap();
        assert_eq!((c.matched, c.reward_sum), (w.matched, w.reward_sum));
        assert_eq!(w.exhausted_steps, w.total - w.matched);
    }

    #[test]
    fn no_repetitions_runs_out() {
        let c = ctx(&[1.0, 0.0]);
        let log = ReplayLog::new(
            arms(2),
            vec![
                LoggedEvent {
                    timestamp: 0,
                    context: c.clone(),
                    arm_id: ArmId::new("a0"),
                    reward: 1.0,
                },
                LoggedEvent {
                    timestamp: 1,
                    context: c,
                    arm_id: ArmId::new("a1"),
                    reward: 0.0,
                },
            ],
        )
        .unwrap();
        let params = ReplayParams::windowed(f64::INFINITY, f64::INFINITY).without_repetitions();
        let r = replay_windowed(&log, &mut FixedArmPolicy(ArmId::new("a0")), &params).unwrap();
        assert_eq!((r.matched, r.exhausted_steps, r.reward_sum), (1, 1, 1.0));

        let with = ReplayParams::windowed(f64::INFINITY, f64::INFINITY);
        let r = replay_windowed(&log, &mut FixedArmPolicy(ArmId::new("a0")), &with).unwrap();
        assert_eq!((r.matched, r.exhausted_steps), (2, 0));
    }

    #[test]
    fn no_repetitions_credits_each_event_at_most_once() {
        let log = uniform_log(2, 3000, 3);
        let params = ReplayParams::windowed(200.0, 200.0)
            .without_repetitions()
            .with_seed(9);
        let mut p = LinUcbPolicy::new(ModelConfig::new(2), &log.header.arm_set).unwrap();
        let r = replay_windowed(&log, &mut p, &params).unwrap();
        // every credited reward consumed a distinct event
        assert!(r.matched <= log.events.len() as u64);
        assert_eq!(r.matched + r.exhausted_steps, r.total);
    }

    #[test]
    fn no_matches_is_an_error() {
        let log = ReplayLog::new(
            arms(2),
            vec![LoggedEvent {
                timestamp: 0,
                context: ctx(&[1.0]),
                arm_id: ArmId::new("a0"),
                reward: 1.0,
            }],
        )
        .unwrap();
        let e = replay_classic(&log, &mut FixedArmPolicy(ArmId::new("a1"))).unwrap_err();
        assert!(matches!(e, ReplayError::NoMatches { total: 1 }));
    }

    #[test]
    fn windowed_is_deterministic_under_seed() {
        let log = uniform_log(3, 3000, 11);
        let params = ReplayParams::windowed(f64::INFINITY, f64::INFINITY).with_seed(42);
        let run = || {
            let mut p = LinUcbPolicy::new(ModelConfig::new(2), &log.header.arm_set).unwrap();
            serde_json::to_string(&replay_windowed(&log, &mut p, &params).unwrap()).unwrap()
        };
        assert_eq!(run(), run());
        assert!(run().contains("\"t1_ms\":\"inf\""));
    }

    #[test]
    fn params_validation_and_json() {
        assert!(ReplayParams::windowed(0.0, 0.0).validate().is_err());
        assert!(ReplayParams::windowed(-1.0, 5.0).validate().is_err());
        assert!(ReplayParams::classic().validate().is_ok());
        let p = ReplayParams::windowed(f64::INFINITY, 30.0).without_repetitions();
        let back: ReplayParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn log_round_trips_and_rejects_bad_headers() {
        let log = uniform_log(3, 50, 2);
        assert_eq!(ReplayLog::from_jsonl(&log.to_jsonl()).unwrap(), log);

        let mut bad = log.clone();
        bad.header.k = 4;
        assert!(ReplayLog::from_jsonl(&bad.to_jsonl()).is_err());
        let mut unordered = log;
        unordered.events.swap(0, 1);
        assert!(unordered.validate().is_err());
        assert!(ReplayLog::from_jsonl("").is_err());
    }

    #[test]
    fn tuning_tie_and_single_point() {
        let log = uniform_log(2, 400, 5);
        let params = ReplayParams::classic();
        let one = tune_lambda(&log, &[3.0], 1.0, &params, Execution::Sequential).unwrap();
        assert_eq!(one.best_lambda, 3.0);

        let mut zeros = log.clone();
        zeros.events.iter_mut().for_each(|e| e.reward = 0.0);
        let tie =
            tune_lambda(&zeros, &[10.0, 0.1, 1.0], 1.0, &params, Execution::Parallel).unwrap();
        assert_eq!(tie.best_lambda, 0.1);
        assert_eq!(tie.per_lambda.len(), 3);

        assert!(tune_lambda(&log, &[], 1.0, &params, Execution::Sequential).is_err());
        assert!(tune_lambda(&log, &[0.0], 1.0, &params, Execution::Sequential).is_err());
    }

    #[test]
    fn tuning_is_identical_across_execution_modes() {
        let log = uniform_log(3, 1500, 8);
        let params = ReplayParams::windowed(100.0, 100.0).with_seed(3);
        let grid = [0.1, 0.5, 1.0, 5.0];
        let a = tune_lambda(&log, &grid, 1.0, &params, Execution::Sequential).unwrap();
        let b = tune_lambda(&log, &grid, 1.0, &params, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn fenwick_matches_naive(n in 1usize..60, ops in proptest::collection::vec((0usize..60, 0usize..60), 0..80)) {
            let mut tree = Fenwick::ones(n);
            let mut flags = vec![true; n];
            for (a, b) in ops {
                let (start, end) = (a % n, (b % n) + 1);
                let naive: Vec<usize> = (start..end.max(start)).filter(|&i| flags[i]).collect();
                let before = tree.prefix(start);
                prop_assert_eq!(tree.prefix(end.max(start)) - before, naive.len());
                if let Some(&first) = naive.first() {
                    let got = tree.find_kth(before);
                    prop_assert_eq!(got, first);
                    let last = tree.find_kth(before + naive.len() - 1);
                    prop_assert_eq!(last, *naive.last().unwrap());
                    tree.remove(got);
                    flags[got] = false;
                }
            }
        }
    }
}
