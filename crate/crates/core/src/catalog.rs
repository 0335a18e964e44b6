//! Arm descriptors and the pluggable source of an instance's active arm set.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ArmId;

/// An arm and the type label constraint rules refer to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArmSpec {
    pub arm_id: ArmId,
    #[serde(default)]
    pub arm_type: String,
}

impl ArmSpec {
    pub fn new(arm_id: impl Into<String>, arm_type: impl Into<String>) -> Self {
        Self {
            arm_id: ArmId::new(arm_id),
            arm_type: arm_type.into(),
        }
    }
}

/// Accepts either `"arm"` or `{"arm_id": "arm", "arm_type": "T"}` per entry.
#[derive(Deserialize)]
#[serde(untagged)]
enum ArmEntry {
    Bare(String),
    Full(ArmSpec),
}

/// Parses a JSON arm array.
pub fn parse_arm_list(text: &str) -> Result<Vec<ArmSpec>, ArmSourceError> {
    let entries: Vec<ArmEntry> =
        serde_json::from_str(text).map_err(|e| ArmSourceError::Malformed(e.to_string()))?;
    let arms: Vec<ArmSpec> = entries
        .into_iter()
        .map(|e| match e {
            ArmEntry::Bare(id) => ArmSpec::new(id, ""),
            ArmEntry::Full(spec) => spec,
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    for a in &arms {
        if !seen.insert(&a.arm_id) {
            return Err(ArmSourceError::Malformed(format!(
                "duplicate arm `{}`",
                a.arm_id
            )));
        }
    }
    Ok(arms)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArmSourceError {
    #[error("arm source unavailable: {0}")]
    Unavailable(String),
    #[error("malformed arm list: {0}")]
    Malformed(String),
}

pub trait ArmSource: Send + Sync {
    fn fetch(&self, instance_id: &str) -> Result<Vec<ArmSpec>, ArmSourceError>;
}

/// Fixed arm lists, keyed by instance.
#[derive(Debug, Clone, Default)]
pub struct StaticArmSource {
    arms: HashMap<String, Vec<ArmSpec>>,
}

impl StaticArmSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, instance_id: impl Into<String>, arms: Vec<ArmSpec>) -> Self {
        self.arms.insert(instance_id.into(), arms);
        self
    }

    pub fn set(&mut self, instance_id: impl Into<String>, arms: Vec<ArmSpec>) {
        self.arms.insert(instance_id.into(), arms);
    }
}

impl ArmSource for StaticArmSource {
    fn fetch(&self, instance_id: &str) -> Result<Vec<ArmSpec>, ArmSourceError> {
        self.arms
            .get(instance_id)
            .cloned()
            .ok_or_else(|| ArmSourceError::Unavailable(format!("no arms for `{instance_id}`")))
    }
}

/// Reads `{dir}/{instance_id}.json` on every fetch.
#[derive(Debug, Clone)]
pub struct FileArmSource {
    dir: PathBuf,
}

impl FileArmSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl ArmSource for FileArmSource {
    fn fetch(&self, instance_id: &str) -> Result<Vec<ArmSpec>, ArmSourceError> {
        let path = self.dir.join(format!("{instance_id}.json"));
        let text = fs::read_to_string(&path)
            .map_err(|e| ArmSourceError::Unavailable(format!("{}: {e}", path.display())))?;
        parse_arm_list(&text)
    }
}

/// Arm-type lookup used by the constraint filter.
#[derive(Debug, Clone, Default)]
pub struct ArmCatalog {
    types: BTreeMap<ArmId, String>,
}

impl ArmCatalog {
    pub fn new(arms: &[ArmSpec]) -> Self {
        Self {
            types: arms
                .iter()
                .map(|a| (a.arm_id.clone(), a.arm_type.clone()))
                .collect(),
        }
    }

    /// Unknown arms have the empty type.
    pub fn type_of(&self, arm: &ArmId) -> &str {
        self.types.get(arm).map(String::as_str).unwrap_or("")
    }

    pub fn insert(&mut self, spec: ArmSpec) {
        self.types.insert(spec.arm_id, spec.arm_type);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_entry_forms() {
        let arms = parse_arm_list(r#"["a", {"arm_id": "b", "arm_type": "promo"}]"#).unwrap();
        assert_eq!(
            arms,
            vec![ArmSpec::new("a", ""), ArmSpec::new("b", "promo")]
        );
        assert!(parse_arm_list(r#"["a", "a"]"#).is_err());
        assert!(parse_arm_list("{}").is_err());
    }

    #[test]
    fn file_source() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("feed.json"), r#"["x", "y"]"#).unwrap();
        let src = FileArmSource::new(dir.path());
        assert_eq!(src.fetch("feed").unwrap().len(), 2);
        assert!(matches!(
            src.fetch("other"),
            Err(ArmSourceError::Unavailable(_))
        ));
    }
}
