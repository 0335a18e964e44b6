//! Instance registry: the JSON file describing every bandit instance a
//! process hosts.
//!
//! ```json
//! {"instances": [{
//!   "instance_id": "feed",
//!   "schema": "schemas/feed.json",
//!   "model": {"lambda": 1.0, "alpha": 1.0},
//!   "rules": [{"kind": "MaxConsecutive", "arm_type": "promo", "j": 2}],
//!   "cycle_period_secs": 120,
//!   "keyspaces": [{"test_id": "t1", "variant_id": "control"}],
//!   "fallback_on_empty_eligible": false,
//!   "arms": ["a", {"arm_id": "b", "arm_type": "promo"}]
//! }]}
//! ```
//!
//! `schema` is a path (relative to the registry file) or an inline schema
//! document. `arms` is an inline list, `{"dir": ...}` for a directory of
//! `{instance}.json` arm lists, or `{"url": ...}` for an external endpoint
//! resolved by the caller.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{parse_arm_list, ArmSpec};
use crate::context::FeatureSchema;
use crate::model::ModelConfig;
use crate::records::Keyspace;
use crate::serving::ConstraintRule;
use crate::training::RegistryEntry;

pub const DEFAULT_CYCLE_PERIOD_SECS: u64 = 120;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("instance `{instance}`: {reason}")]
    Invalid { instance: String, reason: String },
    #[error("registry: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Path(PathBuf),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub alpha: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_cycle() -> u64 {
    DEFAULT_CYCLE_PERIOD_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyspaceRef {
    pub test_id: String,
    pub variant_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArmsRef {
    Dir { dir: PathBuf },
    Url { url: String },
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub instance_id: String,
    pub schema: SchemaRef,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub rules: Vec<ConstraintRule>,
    #[serde(default = "default_cycle")]
    pub cycle_period_secs: u64,
    pub keyspaces: Vec<KeyspaceRef>,
    #[serde(default)]
    pub fallback_on_empty_eligible: bool,
    pub arms: ArmsRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryFile {
    pub instances: Vec<InstanceConfig>,
}

/// Where an instance's active arm set comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmOrigin {
    Static(Vec<ArmSpec>),
    Dir(PathBuf),
    Url(String),
}

/// An instance with every reference resolved and checked.
#[derive(Debug, Clone)]
pub struct Instance {
    pub config: InstanceConfig,
    pub schema: Arc<FeatureSchema>,
    pub model_config: ModelConfig,
    pub keyspaces: Vec<Keyspace>,
    pub arms: ArmOrigin,
}

impl Instance {
    pub fn keyspace(&self, test_id: &str, variant_id: &str) -> Option<&Keyspace> {
        self.keyspaces
            .iter()
            .find(|k| k.test_id == test_id && k.variant_id == variant_id)
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    pub instances: Vec<Instance>,
    /// Raw file bytes, for run manifests.
    pub source_bytes: Vec<u8>,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: RegistryFile =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut registry = Self::resolve(file, base)?;
        registry.source_bytes = bytes;
        Ok(registry)
    }

    pub fn resolve(file: RegistryFile, base: &Path) -> Result<Self, ConfigError> {
        if file.instances.is_empty() {
            return Err(ConfigError::Registry("no instances configured".into()));
        }
        let mut ids = HashSet::new();
        let mut instances = Vec::with_capacity(file.instances.len());
        for config in file.instances {
            if !ids.insert(config.instance_id.clone()) {
                return Err(ConfigError::Registry(format!(
                    "duplicate instance `{}`",
                    config.instance_id
                )));
            }
            instances.push(resolve_instance(config, base)?);
        }
        Ok(Self {
            instances,
            source_bytes: Vec::new(),
        })
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.config.instance_id == id)
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.instances
            .iter()
            .map(|i| RegistryEntry {
                instance_id: i.config.instance_id.clone(),
                keyspaces: i.keyspaces.clone(),
            })
            .collect()
    }
}

fn resolve_instance(config: InstanceConfig, base: &Path) -> Result<Instance, ConfigError> {
    let invalid = |reason: String| ConfigError::Invalid {
        instance: config.instance_id.clone(),
        reason,
    };
    if config.instance_id.is_empty() || config.instance_id.contains(['/', '\\']) {
        return Err(invalid(
            "instance_id must be non-empty and free of path separators".into(),
        ));
    }
    let schema = match &config.schema {
        SchemaRef::Path(p) => {
            let path = base.join(p);
            let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            FeatureSchema::from_json(&text).map_err(|e| ConfigError::Parse {
                path,
                reason: e.to_string(),
            })?
        }
        SchemaRef::Inline(v) => {
            FeatureSchema::from_json(&v.to_string()).map_err(|e| invalid(e.to_string()))?
        }
    };
    let model_config = ModelConfig::new(schema.dimension())
        .with_lambda(config.model.lambda)
        .with_alpha(config.model.alpha);
    model_config
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
    if config.cycle_period_secs == 0 {
        return Err(invalid("cycle_period_secs must be positive".into()));
    }
    if config.keyspaces.is_empty() {
        return Err(invalid("at least one keyspace is required".into()));
    }
    let mut keyspaces = Vec::new();
    for k in &config.keyspaces {
        let ks = Keyspace::new(&config.instance_id, &k.test_id, &k.variant_id);
        ks.validate().map_err(&invalid)?;
        if keyspaces.contains(&ks) {
            return Err(invalid(format!("duplicate keyspace {ks}")));
        }
        keyspaces.push(ks);
    }
    let arms = match &config.arms {
        ArmsRef::Inline(v) => {
            let list = parse_arm_list(&v.to_string()).map_err(|e| invalid(e.to_string()))?;
            if list.is_empty() {
                return Err(invalid("arm list is empty".into()));
            }
            ArmOrigin::Static(list)
        }
        ArmsRef::Dir { dir } => ArmOrigin::Dir(base.join(dir)),
        ArmsRef::Url { url } => ArmOrigin::Url(url.clone()),
    };
    // rule types can only be checked against a declared list
    let declared: Option<BTreeSet<String>> = match &arms {
        ArmOrigin::Static(list) => Some(list.iter().map(|a| a.arm_type.clone()).collect()),
        _ => None,
    };
    for rule in &config.rules {
        rule.validate(declared.as_ref()).map_err(&invalid)?;
    }
    Ok(Instance {
        schema: Arc::new(schema),
        model_config,
        keyspaces,
        arms,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema_doc() -> serde_json::Value {
        json!({"schema_version": 1, "features": [
            {"name": "device", "kind": "categorical", "categories": ["desktop", "mobile"],
             "coarse_merge": {"desktop": "large", "mobile": "small"}}
        ]})
    }

    fn registry(instance: serde_json::Value) -> Result<Registry, ConfigError> {
        let file: RegistryFile =
            serde_json::from_value(json!({ "instances": [instance] })).unwrap();
        Registry::resolve(file, Path::new("."))
    }

    fn base() -> serde_json::Value {
        json!({
            "instance_id": "feed",
            "schema": schema_doc(),
            "keyspaces": [{"test_id": "t", "variant_id": "a"}, {"test_id": "t", "variant_id": "b"}],
            "rules": [{"kind": "MaxConsecutive", "arm_type": "promo", "j": 2}],
            "arms": ["x", {"arm_id": "y", "arm_type": "promo"}]
        })
    }

    #[test]
    fn resolves_inline_instance_with_defaults() {
        let r = registry(base()).unwrap();
        let i = r.instance("feed").unwrap();
        assert_eq!(i.config.cycle_period_secs, 120);
        assert_eq!(i.model_config.lambda, 1.0);
        assert_eq!(i.model_config.dimension, i.schema.dimension());
        assert_eq!(i.keyspaces.len(), 2);
        assert!(matches!(&i.arms, ArmOrigin::Static(a) if a.len() == 2));
        assert_eq!(r.entries()[0].keyspaces, i.keyspaces);
    }

    #[test]
    fn rejects_bad_references() {
        let mut v = base();
        v["rules"] = json!([{"kind": "MinWithinPrefix", "arm_type": "video", "n": 3}]);
        assert!(registry(v).is_err());

        let mut v = base();
        v["keyspaces"] = json!([]);
        assert!(registry(v).is_err());

        let mut v = base();
        v["model"] = json!({"lambda": -1.0});
        assert!(registry(v).is_err());

        let mut v = base();
        v["schema"] = json!("does/not/exist.json");
        assert!(matches!(registry(v), Err(ConfigError::Io { .. })));

        let mut v = base();
        v["arms"] = json!(["x", "x"]);
        assert!(registry(v).is_err());
    }

    #[test]
    fn loads_schema_relative_to_registry_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("schema.json"), schema_doc().to_string()).unwrap();
        let mut v = base();
        v["schema"] = json!("schema.json");
        v["arms"] = json!({"dir": "arms"});
        let path = dir.path().join("registry.json");
        fs::write(&path, json!({"instances": [v]}).to_string()).unwrap();
        let r = Registry::load(&path).unwrap();
        let i = &r.instances[0];
        assert_eq!(i.arms, ArmOrigin::Dir(dir.path().join("arms")));
        assert!(!r.source_bytes.is_empty());
    }
}
