//! Model Holder: versioned snapshot files per keyspace plus a `CURRENT`
//! pointer swapped by rename.
//!
//! Layout: `{root}/{instance}/{test}/{variant}/model.v{N}` and `CURRENT`
//! (containing `N`). A snapshot file is fully written before the pointer
//! flips, so readers only ever see complete entries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::io::write_atomic;
use crate::model::{BanditModel, ModelDocument};
use crate::records::Keyspace;

pub const CURRENT_FILE: &str = "CURRENT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHolderEntry {
    pub keyspace: Keyspace,
    pub model_version: u64,
    pub publish_time: i64,
    /// Window ids already folded into this snapshot's lineage, ascending.
    pub consumed_windows: Vec<u64>,
    pub model: ModelDocument,
}

impl ModelHolderEntry {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("entry serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        serde_json::from_slice(bytes).map_err(|e| TrainError::Corrupt(e.to_string()))
    }
}

/// A published entry with its decoded model.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub entry: ModelHolderEntry,
    pub model: BanditModel,
}

impl Snapshot {
    pub fn from_entry(entry: ModelHolderEntry) -> Result<Self, TrainError> {
        let model = BanditModel::from_document(entry.model.clone())?;
        if model.version() != entry.model_version {
            return Err(TrainError::Corrupt(format!(
                "entry version {} does not match model version {}",
                entry.model_version,
                model.version()
            )));
        }
        Ok(Self { entry, model })
    }
}

/// Crash points inside [`ModelHolder::publish_with`], for fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishStage {
    /// A torn temp file for the snapshot exists.
    SnapshotTmpPartial,
    /// The snapshot file is in place; the pointer still names the old one.
    SnapshotWritten,
    /// A torn temp file for the pointer exists.
    PointerTmpPartial,
}

pub struct ModelHolder {
    root: PathBuf,
    cache: RwLock<HashMap<Keyspace, Arc<Snapshot>>>,
}

impl ModelHolder {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn keyspace_dir(&self, keyspace: &Keyspace) -> PathBuf {
        self.root.join(keyspace.rel_path())
    }

    pub fn snapshot_path(&self, keyspace: &Keyspace, version: u64) -> PathBuf {
        self.keyspace_dir(keyspace)
            .join(format!("model.v{version}"))
    }

    /// Latest published snapshot; served from memory once loaded.
    pub fn get(&self, keyspace: &Keyspace) -> Result<Arc<Snapshot>, TrainError> {
        if let Some(s) = self.cache.read().get(keyspace) {
            return Ok(Arc::clone(s));
        }
        self.reload(keyspace)
    }

    /// Re-reads the pointer from disk, picking up publishes from other
    /// processes.
    pub fn reload(&self, keyspace: &Keyspace) -> Result<Arc<Snapshot>, TrainError> {
        let version = self
            .current_version(keyspace)?
            .ok_or_else(|| TrainError::ModelNotFound(keyspace.clone()))?;
        if let Some(s) = self.cache.read().get(keyspace) {
            if s.entry.model_version == version {
                return Ok(Arc::clone(s));
            }
        }
        let snap = Arc::new(self.load_version(keyspace, version)?);
        let mut cache = self.cache.write();
        match cache.get(keyspace) {
            Some(existing) if existing.entry.model_version >= version => Ok(Arc::clone(existing)),
            _ => {
                cache.insert(keyspace.clone(), Arc::clone(&snap));
                Ok(snap)
            }
        }
    }

    pub fn current_version(&self, keyspace: &Keyspace) -> Result<Option<u64>, TrainError> {
        let path = self.keyspace_dir(keyspace).join(CURRENT_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => text
                .trim()
                .parse::<u64>()
                .map(Some)
                .map_err(|e| TrainError::Corrupt(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn load_version(&self, keyspace: &Keyspace, version: u64) -> Result<Snapshot, TrainError> {
        let bytes = fs::read(self.snapshot_path(keyspace, version))?;
        Snapshot::from_entry(ModelHolderEntry::from_bytes(&bytes)?)
    }

    /// Raw bytes of the current snapshot file.
    pub fn current_bytes(&self, keyspace: &Keyspace) -> Result<Vec<u8>, TrainError> {
        let version = self
            .current_version(keyspace)?
            .ok_or_else(|| TrainError::ModelNotFound(keyspace.clone()))?;
        Ok(fs::read(self.snapshot_path(keyspace, version))?)
    }

    /// All snapshot versions on disk, ascending (including any written but
    /// never pointed to).
    pub fn versions(&self, keyspace: &Keyspace) -> Result<Vec<u64>, TrainError> {
        let dir = self.keyspace_dir(keyspace);
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let name = entry?.file_name();
            if let Some(v) = name
                .to_string_lossy()
                .strip_prefix("model.v")
                .and_then(|s| s.parse::<u64>().ok())
            {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Every snapshot on disk, decoded and keyed by model version.
    pub fn history(&self, keyspace: &Keyspace) -> Result<BTreeMap<u64, BanditModel>, TrainError> {
        self.versions(keyspace)?
            .into_iter()
            .map(|v| Ok((v, self.load_version(keyspace, v)?.model)))
            .collect()
    }

    pub fn publish(&self, entry: ModelHolderEntry) -> Result<Arc<Snapshot>, TrainError> {
        self.publish_with(entry, &mut |_| Ok(()))
    }

    pub fn publish_with(
        &self,
        entry: ModelHolderEntry,
        fault: &mut dyn FnMut(PublishStage) -> Result<(), TrainError>,
    ) -> Result<Arc<Snapshot>, TrainError> {
        let keyspace = entry.keyspace.clone();
        if let Some(current) = self.current_version(&keyspace)? {
            if entry.model_version <= current {
                return Err(TrainError::StaleVersion {
                    keyspace,
                    current,
                    attempted: entry.model_version,
                });
            }
        }
        let snap = Arc::new(Snapshot::from_entry(entry)?);
        let bytes = snap.entry.to_bytes();
        let path = self.snapshot_path(&keyspace, snap.entry.model_version);
        if let Err(e) = fault(PublishStage::SnapshotTmpPartial) {
            torn_write(&path, &bytes)?;
            return Err(e);
        }
        write_atomic(&path, &bytes)?;
        fault(PublishStage::SnapshotWritten)?;
        let pointer = self.keyspace_dir(&keyspace).join(CURRENT_FILE);
        let version_text = snap.entry.model_version.to_string();
        if let Err(e) = fault(PublishStage::PointerTmpPartial) {
            torn_write(&pointer, &version_text.as_bytes()[..version_text.len() / 2])?;
            return Err(e);
        }
        write_atomic(&pointer, version_text.as_bytes())?;
        self.cache.write().insert(keyspace, Arc::clone(&snap));
        Ok(snap)
    }
}

/// Leaves half of `bytes` in the temp sibling of `path`, as a crash
/// mid-write would.
fn torn_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(crate::io::tmp_path(path), &bytes[..bytes.len() / 2])
}
