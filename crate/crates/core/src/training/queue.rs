//! Task Queue: periodic per-keyspace update tasks carrying the active arm set.

use std::collections::{BTreeSet, HashSet, VecDeque};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::catalog::{ArmSource, ArmSpec};
use crate::model::ArmId;
use crate::records::Keyspace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTask {
    pub instance_id: String,
    pub keyspace: Keyspace,
    pub active_arms: BTreeSet<ArmId>,
    pub enqueue_time: i64,
}

/// What the queue needs to know about one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub instance_id: String,
    pub keyspaces: Vec<Keyspace>,
}

/// Outcome of one enqueue cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleReport {
    pub enqueued: Vec<UpdateTask>,
    /// Keyspaces skipped because a task for them is still pending.
    pub coalesced: Vec<Keyspace>,
    /// Instances whose arm source failed; retried next cycle.
    pub skipped: Vec<(String, String)>,
    /// Arm specs fetched per instance, for catalog refreshes.
    pub arms: Vec<(String, Vec<ArmSpec>)>,
}

#[derive(Default)]
struct QueueState {
    tasks: VecDeque<UpdateTask>,
    /// queued or in flight
    pending: HashSet<Keyspace>,
}

#[derive(Default)]
pub struct TaskQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl TaskQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue_cycle(
        &self,
        registry: &[RegistryEntry],
        arm_source: &dyn ArmSource,
        now_ms: i64,
    ) -> CycleReport {
        let mut report = CycleReport::default();
        for instance in registry {
            let arms = match arm_source.fetch(&instance.instance_id) {
                Ok(arms) if !arms.is_empty() => arms,
                Ok(_) => {
                    report
                        .skipped
                        .push((instance.instance_id.clone(), "empty arm set".into()));
                    continue;
                }
                Err(e) => {
                    tracing::warn!(instance = %instance.instance_id, error = %e, "arm source failed; skipping cycle");
                    report
                        .skipped
                        .push((instance.instance_id.clone(), e.to_string()));
                    continue;
                }
            };
            let active: BTreeSet<ArmId> = arms.iter().map(|a| a.arm_id.clone()).collect();
            let mut state = self.state.lock();
            for keyspace in &instance.keyspaces {
                if !state.pending.insert(keyspace.clone()) {
                    report.coalesced.push(keyspace.clone());
                    continue;
                }
                let task = UpdateTask {
                    instance_id: instance.instance_id.clone(),
                    keyspace: keyspace.clone(),
                    active_arms: active.clone(),
                    enqueue_time: now_ms,
                };
                state.tasks.push_back(task.clone());
                report.enqueued.push(task);
            }
            drop(state);
            report.arms.push((instance.instance_id.clone(), arms));
        }
        if !report.enqueued.is_empty() {
            self.ready.notify_all();
        }
        report
    }

    pub fn pop(&self) -> Option<UpdateTask> {
        self.state.lock().tasks.pop_front()
    }

    /// Blocks up to `timeout` for a task.
    pub fn pop_wait(&self, timeout: std::time::Duration) -> Option<UpdateTask> {
        let mut state = self.state.lock();
        if state.tasks.is_empty() {
            self.ready.wait_for(&mut state, timeout);
        }
        state.tasks.pop_front()
    }

    /// Releases the keyspace so the next cycle may enqueue it again.
    pub fn complete(&self, task: &UpdateTask) {
        self.state.lock().pending.remove(&task.keyspace);
    }

    pub fn len(&self) -> usize {
        self.state.lock().tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
