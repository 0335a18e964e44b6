//! Decision/reward join and mini-batch aggregation.
//!
//! Decisions are tallied into the open window of their keyspace. Rewards
//! join on `decision_id`; a reward whose decision has not been seen yet waits
//! in a pending buffer until the decision arrives or its TTL lapses. A reward
//! whose decision's window is already closed is credited to the currently
//! open window under the decision's (context, arm) cell.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextKey, ContextVector};
use crate::io::{read_jsonl, write_jsonl_atomic, JsonlAppender};
use crate::model::ArmId;
use crate::records::{AggregateTuple, DecisionRecord, Keyspace, RewardRecord};

/// Six hours.
pub const DEFAULT_ORPHAN_TTL_MS: i64 = 6 * 60 * 60 * 1000;

pub const WINDOW_FILE_SUFFIX: &str = ".agg.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("duplicate decision `{0}`")]
    DuplicateDecision(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("window {window_id} is not open for keyspace {keyspace}")]
    UnknownWindow { keyspace: Keyspace, window_id: u64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub orphan_ttl_ms: i64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            orphan_ttl_ms: DEFAULT_ORPHAN_TTL_MS,
        }
    }
}

/// Counters exposed for monitoring and conservation checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub decisions: u64,
    pub duplicate_decisions: u64,
    pub matched_rewards: u64,
    pub matched_reward_sum: f64,
    pub late_rewards: u64,
    pub pending_rewards: u64,
    pub expired_orphans: u64,
    pub closed_windows: u64,
}

#[derive(Debug, Clone)]
struct DecisionRef {
    keyspace: Keyspace,
    context: Arc<ContextVector>,
    arm: ArmId,
    window_id: u64,
}

#[derive(Debug, Clone)]
struct Cell {
    context: Arc<ContextVector>,
    pulls: u64,
    reward_sum: f64,
}

#[derive(Debug, Clone, Default)]
struct KeyspaceState {
    open_window: u64,
    cells: BTreeMap<(ContextKey, ArmId), Cell>,
}

impl KeyspaceState {
    fn cell(&mut self, context: &Arc<ContextVector>, arm: &ArmId) -> &mut Cell {
        self.cells
            .entry((context.key(), arm.clone()))
            .or_insert_with(|| Cell {
                context: Arc::clone(context),
                pulls: 0,
                reward_sum: 0.0,
            })
    }
}

#[derive(Debug, Clone)]
struct PendingReward {
    reward: f64,
    timestamp: i64,
}

/// In-memory aggregation state.
#[derive(Debug, Clone, Default)]
pub struct Aggregator {
    config: PipelineConfig,
    decisions: HashMap<String, DecisionRef>,
    keyspaces: BTreeMap<Keyspace, KeyspaceState>,
    pending: HashMap<String, Vec<PendingReward>>,
    stats: PipelineStats,
}

impl Aggregator {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn keyspaces(&self) -> impl Iterator<Item = &Keyspace> {
        self.keyspaces.keys()
    }

    /// Id of the open window for `keyspace`, registering the keyspace if new.
    pub fn open_window(&mut self, keyspace: &Keyspace) -> u64 {
        self.keyspaces
            .entry(keyspace.clone())
            .or_default()
            .open_window
    }

    pub fn ingest_decision(&mut self, rec: &DecisionRecord) -> Result<(), PipelineError> {
        if self.decisions.contains_key(&rec.decision_id) {
            self.stats.duplicate_decisions += 1;
            return Err(PipelineError::DuplicateDecision(rec.decision_id.clone()));
        }
        let keyspace = rec.keyspace();
        keyspace.validate().map_err(PipelineError::InvalidValue)?;
        let context = Arc::new(rec.context.clone());
        let state = self.keyspaces.entry(keyspace.clone()).or_default();
        state.cell(&context, &rec.arm_id).pulls += 1;
        let window_id = state.open_window;
        self.decisions.insert(
            rec.decision_id.clone(),
            DecisionRef {
                keyspace,
                context,
                arm: rec.arm_id.clone(),
                window_id,
            },
        );
        self.stats.decisions += 1;
        if let Some(waiting) = self.pending.remove(&rec.decision_id) {
            self.stats.pending_rewards -= waiting.len() as u64;
            for p in waiting {
                self.credit(&rec.decision_id, p.reward);
            }
        }
        Ok(())
    }

    pub fn ingest_reward(&mut self, rec: &RewardRecord) -> Result<(), PipelineError> {
        if !rec.reward.is_finite() {
            return Err(PipelineError::InvalidValue(format!(
                "non-finite reward for `{}`",
                rec.decision_id
            )));
        }
        if self.decisions.contains_key(&rec.decision_id) {
            self.credit(&rec.decision_id, rec.reward);
        } else {
            self.pending
                .entry(rec.decision_id.clone())
                .or_default()
                .push(PendingReward {
                    reward: rec.reward,
                    timestamp: rec.timestamp,
                });
            self.stats.pending_rewards += 1;
        }
        Ok(())
    }

    fn credit(&mut self, decision_id: &str, reward: f64) {
        let d = &self.decisions[decision_id];
        let state = self
            .keyspaces
            .get_mut(&d.keyspace)
            .expect("decision keyspace registered");
        if d.window_id != state.open_window {
            self.stats.late_rewards += 1;
        }
        state.cell(&d.context, &d.arm).reward_sum += reward;
        self.stats.matched_rewards += 1;
        self.stats.matched_reward_sum += reward;
    }

    /// Drops pending rewards older than the TTL; returns how many expired.
    pub fn expire_orphans(&mut self, now_ms: i64) -> u64 {
        let ttl = self.config.orphan_ttl_ms;
        let mut expired = 0;
        self.pending.retain(|_, rewards| {
            let before = rewards.len();
            rewards.retain(|p| p.timestamp.saturating_add(ttl) > now_ms);
            expired += (before - rewards.len()) as u64;
            !rewards.is_empty()
        });
        self.stats.expired_orphans += expired;
        self.stats.pending_rewards -= expired;
        expired
    }

    /// Tuples the open window would emit, without closing it.
    pub fn peek_window(
        &self,
        keyspace: &Keyspace,
        window_id: u64,
    ) -> Result<Vec<AggregateTuple>, PipelineError> {
        let unknown = || PipelineError::UnknownWindow {
            keyspace: keyspace.clone(),
            window_id,
        };
        let state = match self.keyspaces.get(keyspace) {
            Some(s) => s,
            // unseen keyspaces have an implicit, empty window 0
            None if window_id == 0 => return Ok(Vec::new()),
            None => return Err(unknown()),
        };
        if state.open_window != window_id {
            return Err(unknown());
        }
        Ok(state
            .cells
            .iter()
            .map(|((_, arm), cell)| AggregateTuple {
                keyspace: keyspace.clone(),
                context: (*cell.context).clone(),
                arm_id: arm.clone(),
                pulls: cell.pulls,
                reward_sum: cell.reward_sum,
                window_id,
            })
            .collect())
    }

    pub fn close_window(
        &mut self,
        keyspace: &Keyspace,
        window_id: u64,
    ) -> Result<Vec<AggregateTuple>, PipelineError> {
        let tuples = self.peek_window(keyspace, window_id)?;
        let state = self.keyspaces.entry(keyspace.clone()).or_default();
        state.cells.clear();
        state.open_window += 1;
        self.stats.closed_windows += 1;
        Ok(tuples)
    }
}

/// Path of the aggregate file for one closed window.
pub fn window_path(agg_root: &Path, keyspace: &Keyspace, window_id: u64) -> PathBuf {
    agg_root
        .join(keyspace.rel_path())
        .join(format!("{window_id}{WINDOW_FILE_SUFFIX}"))
}

/// Closed window ids present on disk for `keyspace`, ascending.
pub fn list_windows(agg_root: &Path, keyspace: &Keyspace) -> io::Result<Vec<u64>> {
    let dir = agg_root.join(keyspace.rel_path());
    let mut ids = Vec::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ids),
        Err(e) => return Err(e),
    };
    for entry in entries {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_suffix(WINDOW_FILE_SUFFIX)
            .and_then(|s| s.parse::<u64>().ok())
        {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn read_window(
    agg_root: &Path,
    keyspace: &Keyspace,
    window_id: u64,
) -> io::Result<Vec<AggregateTuple>> {
    read_jsonl(&window_path(agg_root, keyspace, window_id))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum JournalEntry {
    Decision(DecisionRecord),
    Reward(RewardRecord),
    Expire { now_ms: i64 },
    Close { keyspace: Keyspace, window_id: u64 },
}

/// Journaled aggregator. Every accepted input is appended to a journal;
/// reopening replays it to rebuild the in-memory cells. Closed windows are
/// written as `{agg_root}/{instance}/{test}/{variant}/{window_id}.agg.jsonl`.
pub struct PipelineStore {
    agg_root: PathBuf,
    aggregator: Aggregator,
    journal: JsonlAppender,
}

impl PipelineStore {
    pub fn open(
        journal_path: &Path,
        agg_root: &Path,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        let mut aggregator = Aggregator::new(config);
        if journal_path.exists() {
            for entry in read_jsonl::<JournalEntry>(journal_path)? {
                match entry {
                    JournalEntry::Decision(d) => {
                        // duplicates were journaled only if accepted, but tolerate them
                        let _ = aggregator.ingest_decision(&d);
                    }
                    JournalEntry::Reward(r) => aggregator.ingest_reward(&r)?,
                    JournalEntry::Expire { now_ms } => {
                        aggregator.expire_orphans(now_ms);
                    }
                    JournalEntry::Close {
                        keyspace,
                        window_id,
                    } => {
                        let tuples = aggregator.close_window(&keyspace, window_id)?;
                        let path = window_path(agg_root, &keyspace, window_id);
                        if !path.exists() {
                            write_jsonl_atomic(&path, &tuples)?;
                        }
                    }
                }
            }
        }
        Ok(Self {
            agg_root: agg_root.to_path_buf(),
            aggregator,
            journal: JsonlAppender::open(journal_path)?,
        })
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn agg_root(&self) -> &Path {
        &self.agg_root
    }

    pub fn stats(&self) -> &PipelineStats {
        self.aggregator.stats()
    }

    pub fn ingest_decision(&mut self, rec: &DecisionRecord) -> Result<(), PipelineError> {
        self.aggregator.ingest_decision(rec)?;
        self.journal.append(&JournalEntry::Decision(rec.clone()))?;
        Ok(())
    }

    pub fn ingest_reward(&mut self, rec: &RewardRecord) -> Result<(), PipelineError> {
        self.aggregator.ingest_reward(rec)?;
        self.journal.append(&JournalEntry::Reward(rec.clone()))?;
        Ok(())
    }

    pub fn expire_orphans(&mut self, now_ms: i64) -> Result<u64, PipelineError> {
        let n = self.aggregator.expire_orphans(now_ms);
        if n > 0 {
            self.journal.append(&JournalEntry::Expire { now_ms })?;
        }
        Ok(n)
    }

    pub fn open_window(&mut self, keyspace: &Keyspace) -> u64 {
        self.aggregator.open_window(keyspace)
    }

    /// Closes the window: journal the intent, write the window file, then
    /// commit in memory.
    pub fn close_window(
        &mut self,
        keyspace: &Keyspace,
        window_id: u64,
    ) -> Result<Vec<AggregateTuple>, PipelineError> {
        let tuples = self.aggregator.peek_window(keyspace, window_id)?;
        self.journal.append(&JournalEntry::Close {
            keyspace: keyspace.clone(),
            window_id,
        })?;
        self.journal.flush()?;
        write_jsonl_atomic(&window_path(&self.agg_root, keyspace, window_id), &tuples)?;
        self.aggregator.close_window(keyspace, window_id)?;
        Ok(tuples)
    }

    /// Closes the open window of every known keyspace (plus `extra`).
    pub fn close_all(
        &mut self,
        extra: &[Keyspace],
    ) -> Result<Vec<(Keyspace, u64, usize)>, PipelineError> {
        for k in extra {
            self.aggregator.open_window(k);
        }
        let keyspaces: Vec<Keyspace> = self.aggregator.keyspaces().cloned().collect();
        let mut closed = Vec::new();
        for k in keyspaces {
            let id = self.aggregator.open_window(&k);
            let n = self.close_window(&k, id)?.len();
            closed.push((k, id, n));
        }
        Ok(closed)
    }

    pub fn flush(&mut self) -> Result<(), PipelineError> {
        self.journal.flush()?;
        Ok(())
    }
}
