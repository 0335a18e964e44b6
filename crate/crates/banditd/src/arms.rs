//! Arm lists as the registry declares them: inline, a directory of
//! `{instance}.json` files, or an HTTP endpoint.

use std::collections::HashMap;

use cmab_core::catalog::{ArmSourceError, FileArmSource};
use cmab_core::config::{ArmOrigin, Registry};
use cmab_core::{ArmSource, ArmSpec};

#[derive(Debug, Clone)]
pub struct RegistryArmSource {
    origins: HashMap<String, ArmOrigin>,
}

impl RegistryArmSource {
    pub fn new(registry: &Registry) -> Self {
        Self {
            origins: registry
                .instances
                .iter()
                .map(|i| (i.config.instance_id.clone(), i.arms.clone()))
                .collect(),
        }
    }
}

impl ArmSource for RegistryArmSource {
    fn fetch(&self, instance_id: &str) -> Result<Vec<ArmSpec>, ArmSourceError> {
        match self.origins.get(instance_id) {
            None => Err(ArmSourceError::Unavailable(format!(
                "unknown instance `{instance_id}`"
            ))),
            Some(ArmOrigin::Static(list)) => Ok(list.clone()),
            Some(ArmOrigin::Dir(dir)) => FileArmSource::new(dir).fetch(instance_id),
            Some(ArmOrigin::Url(url)) => fetch_url(&url.replace("{instance_id}", instance_id)),
        }
    }
}

#[cfg(feature = "http-arms")]
fn fetch_url(url: &str) -> Result<Vec<ArmSpec>, ArmSourceError> {
    let body = reqwest::blocking::get(url)
        .and_then(|r| r.error_for_status())
        .and_then(|r| r.text())
        .map_err(|e| ArmSourceError::Unavailable(format!("{url}: {e}")))?;
    cmab_core::catalog::parse_arm_list(&body)
}

#[cfg(not(feature = "http-arms"))]
fn fetch_url(url: &str) -> Result<Vec<ArmSpec>, ArmSourceError> {
    Err(ArmSourceError::Unavailable(format!(
        "{url}: built without the `http-arms` feature"
    )))
}
