//! Offline training layer: task queue, trainer and Model Holder.

mod holder;
mod queue;

use std::collections::{BTreeSet, HashMap};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

pub use holder::{ModelHolder, ModelHolderEntry, PublishStage, Snapshot, CURRENT_FILE};
pub use queue::{CycleReport, RegistryEntry, TaskQueue, UpdateTask};

use crate::model::{BanditModel, ModelConfig, ModelError};
use crate::pipeline::{list_windows, read_window};
use crate::records::Keyspace;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no model published for {0}")]
    ModelNotFound(Keyspace),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("window {window_id} of {keyspace} is unreadable: {reason}")]
    CorruptWindow {
        keyspace: Keyspace,
        window_id: u64,
        reason: String,
    },
    #[error("version {attempted} is not newer than published {current} for {keyspace}")]
    StaleVersion {
        keyspace: Keyspace,
        current: u64,
        attempted: u64,
    },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("injected crash at {0}")]
    Injected(String),
}

/// Points at which a trainer run can be interrupted in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Loaded,
    ArmsReconciled,
    WindowApplied(u64),
    Publish(PublishStage),
    /// After the pointer swap, before the caller hears back.
    Published,
}

/// The Training Service: applies closed windows to keyspace models and
/// publishes snapshots.
pub struct Trainer {
    holder: Arc<ModelHolder>,
    agg_root: PathBuf,
    configs: HashMap<String, ModelConfig>,
    leases: Mutex<HashMap<Keyspace, Arc<Mutex<()>>>>,
}

impl Trainer {
    pub fn new(
        holder: Arc<ModelHolder>,
        agg_root: impl Into<PathBuf>,
        configs: HashMap<String, ModelConfig>,
    ) -> Self {
        Self {
            holder,
            agg_root: agg_root.into(),
            configs,
            leases: Mutex::new(HashMap::new()),
        }
    }

    pub fn holder(&self) -> &Arc<ModelHolder> {
        &self.holder
    }

    pub fn agg_root(&self) -> &Path {
        &self.agg_root
    }

    fn lease(&self, keyspace: &Keyspace) -> Arc<Mutex<()>> {
        Arc::clone(
            self.leases
                .lock()
                .entry(keyspace.clone())
                .or_insert_with(|| Arc::new(Mutex::new(()))),
        )
    }

    pub fn run_task(&self, task: &UpdateTask) -> Result<ModelHolderEntry, TrainError> {
        self.run_task_with(task, &mut |_| Ok(()))
    }

    /// Runs a task, consulting `fault` at each stage; an `Err` from `fault`
    /// aborts the run at that point. Nothing is visible to readers until the
    /// pointer swap at the very end.
    pub fn run_task_with(
        &self,
        task: &UpdateTask,
        fault: &mut dyn FnMut(TrainStage) -> Result<(), TrainError>,
    ) -> Result<ModelHolderEntry, TrainError> {
        let lease = self.lease(&task.keyspace);
        let _guard = lease.lock();
        let keyspace = &task.keyspace;

        let (mut model, mut consumed) = match self.holder.current_version(keyspace)? {
            Some(v) => {
                let snap = self.holder.load_version(keyspace, v)?;
                if snap.entry.publish_time == task.enqueue_time {
                    // a re-delivered task whose publish already landed
                    return Ok(snap.entry);
                }
                (snap.model, snap.entry.consumed_windows)
            }
            None => {
                let config = self
                    .configs
                    .get(&task.instance_id)
                    .ok_or_else(|| TrainError::UnknownInstance(task.instance_id.clone()))?;
                (
                    BanditModel::new(task.instance_id.clone(), *config)?,
                    Vec::new(),
                )
            }
        };
        fault(TrainStage::Loaded)?;

        let present: BTreeSet<_> = model.arm_ids().cloned().collect();
        for retired in present.difference(&task.active_arms) {
            model = model.remove_arm(retired)?;
        }
        for added in task.active_arms.difference(&present) {
            model = model.add_arm(added.clone())?;
        }
        fault(TrainStage::ArmsReconciled)?;

        let done: BTreeSet<u64> = consumed.iter().copied().collect();
        let fresh: Vec<u64> = list_windows(&self.agg_root, keyspace)?
            .into_iter()
            .filter(|w| !done.contains(w))
            .collect();
        let mut batches = Vec::with_capacity(fresh.len());
        for &window_id in &fresh {
            let tuples = read_window(&self.agg_root, keyspace, window_id).map_err(|e| {
                tracing::error!(%keyspace, window_id, error = %e, "corrupt window; task aborted");
                TrainError::CorruptWindow {
                    keyspace: keyspace.clone(),
                    window_id,
                    reason: e.to_string(),
                }
            })?;
            batches.push((window_id, tuples));
        }
        for (window_id, tuples) in &batches {
            // retired arms may still have tuples in flight; drop them
            let live: Vec<_> = tuples
                .iter()
                .filter(|t| model.contains(&t.arm_id))
                .cloned()
                .collect();
            model = model.update_batch(&live)?;
            consumed.push(*window_id);
            fault(TrainStage::WindowApplied(*window_id))?;
        }
        if batches.is_empty() {
            model = model.update_batch(&[])?;
        }

        let entry = ModelHolderEntry {
            keyspace: keyspace.clone(),
            model_version: model.version(),
            publish_time: task.enqueue_time,
            consumed_windows: consumed,
            model: model.to_document(),
        };
        self.holder.publish_with(entry.clone(), &mut |stage| {
            fault(TrainStage::Publish(stage))
        })?;
        fault(TrainStage::Published)?;
        Ok(entry)
    }

    /// Pops and runs every queued task.
    pub fn drain(
        &self,
        queue: &TaskQueue,
    ) -> Vec<(UpdateTask, Result<ModelHolderEntry, TrainError>)> {
        let mut out = Vec::new();
        while let Some(task) = queue.pop() {
            let result = self.run_task(&task);
            if let Err(e) = &result {
                tracing::error!(keyspace = %task.keyspace, error = %e, "update task failed");
            }
            queue.complete(&task);
            out.push((task, result));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ArmSpec, StaticArmSource};
    use crate::context::ContextVector;
    use crate::io::write_jsonl_atomic;
    use crate::model::ArmId;
    use crate::pipeline::window_path;
    use crate::records::AggregateTuple;
    use std::fs;

    fn ks() -> Keyspace {
        Keyspace::new("inst", "t", "v")
    }

    fn setup(dir: &Path) -> Trainer {
        let holder = Arc::new(ModelHolder::new(dir.join("models")));
        let configs = [("inst".to_string(), ModelConfig::new(2))].into();
        Trainer::new(holder, dir.join("agg"), configs)
    }

    fn task(arms: &[&str], t: i64) -> UpdateTask {
        UpdateTask {
            instance_id: "inst".into(),
            keyspace: ks(),
            active_arms: arms.iter().map(|a| ArmId::new(*a)).collect(),
            enqueue_time: t,
        }
    }

    fn write_window(trainer: &Trainer, id: u64, arm: &str, pulls: u64, reward: f64) {
        let tuple = AggregateTuple {
            keyspace: ks(),
            context: ContextVector::from_unified(vec![1.0, 0.0]),
            arm_id: ArmId::new(arm),
            pulls,
            reward_sum: reward,
            window_id: id,
        };
        write_jsonl_atomic(&window_path(trainer.agg_root(), &ks(), id), &[tuple]).unwrap();
    }

    #[test]
    fn bootstrap_then_windows_are_consumed_once() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        let first = trainer.run_task(&task(&["a", "b"], 1)).unwrap();
        assert_eq!(first.model.arms.len(), 2);
        assert!(first.consumed_windows.is_empty());

        write_window(&trainer, 0, "a", 3, 1.0);
        write_window(&trainer, 1, "b", 1, 1.0);
        let second = trainer.run_task(&task(&["a", "b"], 2)).unwrap();
        assert_eq!(second.consumed_windows, vec![0, 1]);
        assert_eq!(second.model_version, first.model_version + 2);

        let third = trainer.run_task(&task(&["a", "b"], 3)).unwrap();
        assert_eq!(third.model_version, second.model_version + 1);
        assert_eq!(third.model.arms, second.model.arms);
    }

    #[test]
    fn new_arm_leaves_others_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        trainer.run_task(&task(&["a", "b"], 1)).unwrap();
        write_window(&trainer, 0, "a", 3, 2.0);
        let before = trainer.run_task(&task(&["a", "b"], 2)).unwrap();
        let after = trainer.run_task(&task(&["a", "b", "c"], 3)).unwrap();
        for state in &before.model.arms {
            let same = after
                .model
                .arms
                .iter()
                .find(|s| s.arm_id == state.arm_id)
                .unwrap();
            assert_eq!(
                serde_json::to_vec(state).unwrap(),
                serde_json::to_vec(same).unwrap()
            );
        }
        let c = after
            .model
            .arms
            .iter()
            .find(|s| s.arm_id.as_str() == "c")
            .unwrap();
        assert_eq!(c.b, vec![0.0, 0.0]);
        assert_eq!(c.update_count, 0);
    }

    #[test]
    fn retired_arm_is_dropped_and_returns_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        trainer.run_task(&task(&["a", "b"], 1)).unwrap();
        write_window(&trainer, 0, "b", 2, 2.0);
        trainer.run_task(&task(&["a", "b"], 2)).unwrap();
        let without = trainer.run_task(&task(&["a"], 3)).unwrap();
        assert!(without.model.arms.iter().all(|s| s.arm_id.as_str() != "b"));
        let back = trainer.run_task(&task(&["a", "b"], 4)).unwrap();
        let b = back
            .model
            .arms
            .iter()
            .find(|s| s.arm_id.as_str() == "b")
            .unwrap();
        assert_eq!(b.update_count, 0);
    }

    #[test]
    fn corrupt_window_consumes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        let first = trainer.run_task(&task(&["a"], 1)).unwrap();
        write_window(&trainer, 0, "a", 1, 1.0);
        let bad = window_path(trainer.agg_root(), &ks(), 1);
        fs::write(&bad, "{not json\n").unwrap();
        let err = trainer.run_task(&task(&["a"], 2)).unwrap_err();
        assert!(matches!(
            err,
            TrainError::CorruptWindow { window_id: 1, .. }
        ));
        let current = trainer.holder().reload(&ks()).unwrap();
        assert_eq!(current.entry, first);
    }

    #[test]
    fn get_model_errors_and_latest() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        assert!(matches!(
            trainer.holder().get(&ks()),
            Err(TrainError::ModelNotFound(_))
        ));
        let v1 = trainer.run_task(&task(&["a"], 1)).unwrap();
        let v2 = trainer.run_task(&task(&["a"], 2)).unwrap();
        assert!(v2.model_version > v1.model_version);
        assert_eq!(trainer.holder().get(&ks()).unwrap().entry, v2);
        // a second holder on the same directory sees the same entry
        let other = ModelHolder::new(dir.path().join("models"));
        assert_eq!(other.get(&ks()).unwrap().entry, v2);
        assert_eq!(
            trainer.holder().versions(&ks()).unwrap(),
            vec![v1.model_version, v2.model_version]
        );
    }

    #[test]
    fn redelivered_task_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        trainer.run_task(&task(&["a"], 1)).unwrap();
        write_window(&trainer, 0, "a", 2, 1.0);
        let once = trainer.run_task(&task(&["a"], 2)).unwrap();
        let again = trainer.run_task(&task(&["a"], 2)).unwrap();
        assert_eq!(once, again);
        assert_eq!(trainer.holder().versions(&ks()).unwrap().len(), 2);
        // a later task still trains
        let later = trainer.run_task(&task(&["a"], 3)).unwrap();
        assert!(later.model_version > once.model_version);
    }

    #[test]
    fn stale_publish_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        let entry = trainer.run_task(&task(&["a"], 1)).unwrap();
        assert!(matches!(
            trainer.holder().publish(entry),
            Err(TrainError::StaleVersion { .. })
        ));
    }

    #[test]
    fn crash_at_every_stage_then_rerun_matches_clean_run() {
        let clean_dir = tempfile::tempdir().unwrap();
        let clean = setup(clean_dir.path());
        clean.run_task(&task(&["a", "b"], 1)).unwrap();
        for w in 0..3 {
            write_window(&clean, w, ["a", "b"][w as usize % 2], w + 1, 1.0);
        }
        let expected = clean.run_task(&task(&["a", "b"], 2)).unwrap();

        let stages = [
            TrainStage::Loaded,
            TrainStage::ArmsReconciled,
            TrainStage::WindowApplied(0),
            TrainStage::WindowApplied(2),
            TrainStage::Publish(PublishStage::SnapshotTmpPartial),
            TrainStage::Publish(PublishStage::SnapshotWritten),
            TrainStage::Publish(PublishStage::PointerTmpPartial),
            TrainStage::Published,
        ];
        for stage in stages {
            let dir = tempfile::tempdir().unwrap();
            let t = setup(dir.path());
            t.run_task(&task(&["a", "b"], 1)).unwrap();
            for w in 0..3 {
                write_window(&t, w, ["a", "b"][w as usize % 2], w + 1, 1.0);
            }
            let err = t
                .run_task_with(&task(&["a", "b"], 2), &mut |s| {
                    if s == stage {
                        Err(TrainError::Injected(format!("{s:?}")))
                    } else {
                        Ok(())
                    }
                })
                .unwrap_err();
            assert!(matches!(err, TrainError::Injected(_)));
            drop(t);
            let restarted = setup(dir.path());
            let entry = restarted.run_task(&task(&["a", "b"], 2)).unwrap();
            assert_eq!(entry, expected, "stage {stage:?}");
            assert_eq!(
                restarted.holder().current_bytes(&ks()).unwrap(),
                clean.holder().current_bytes(&ks()).unwrap()
            );
        }
    }

    #[test]
    fn drain_runs_queue() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = setup(dir.path());
        let queue = TaskQueue::new();
        let registry = vec![RegistryEntry {
            instance_id: "inst".into(),
            keyspaces: vec![ks()],
        }];
        let source = StaticArmSource::new().with("inst", vec![ArmSpec::new("a", "")]);
        queue.enqueue_cycle(&registry, &source, 5);
        let results = trainer.drain(&queue);
        assert_eq!(results.len(), 1);
        assert!(results[0].1.is_ok());
        assert_eq!(queue.enqueue_cycle(&registry, &source, 6).enqueued.len(), 1);
    }

    #[test]
    fn concurrent_tasks_on_one_keyspace_serialize() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = Arc::new(setup(dir.path()));
        trainer.run_task(&task(&["a"], 0)).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let t = Arc::clone(&trainer);
                std::thread::spawn(move || t.run_task(&task(&["a"], i + 1)).unwrap().model_version)
            })
            .collect();
        let mut versions: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        versions.sort_unstable();
        versions.dedup();
        assert_eq!(versions.len(), 8);
    }
}
