//! Named environments: an image reference plus conda-style dependency lists.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};
use serde_yaml::Value as Yaml;
use thiserror::Error;

use crate::domain::is_dns_label;
use crate::store::{Mutation, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub name: String,
    pub image: String,
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default)]
    pub dependencies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvironmentParseError {
    #[error("invalid YAML: {0}")]
    YamlSyntax(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{field}` {reason}")]
    InvalidField { field: &'static str, reason: &'static str },
}

impl EnvironmentParseError {
    pub fn code(&self) -> &'static str {
        match self {
            EnvironmentParseError::YamlSyntax(_) => "YamlSyntax",
            EnvironmentParseError::MissingField(_) => "MissingField",
            EnvironmentParseError::UnknownField(_) => "UnknownField",
            EnvironmentParseError::InvalidField { .. } => "InvalidField",
        }
    }
}

/// Parses an environment file:
///
/// ```yaml
/// name: tf-env
/// image: submarine:tf-mnist
/// channels: [defaults]
/// dependencies: [python=3.8, tensorflow]
/// ```
pub fn parse_environment_yaml(text: &str) -> Result<EnvironmentSpec, EnvironmentParseError> {
    let doc: Yaml = serde_yaml::from_str(text).map_err(|e| EnvironmentParseError::YamlSyntax(e.to_string()))?;
    let Yaml::Mapping(map) = doc else {
        return Err(EnvironmentParseError::YamlSyntax("top level must be a mapping".into()));
    };
    let mut name = None;
    let mut image = None;
    let mut channels = Vec::new();
    let mut dependencies = Vec::new();
    for (key, value) in map {
        let Yaml::String(key) = key else {
            return Err(EnvironmentParseError::UnknownField(format!("{key:?}")));
        };
        match key.as_str() {
            "name" => name = Some(scalar_string(value, "name")?),
            "image" => image = Some(scalar_string(value, "image")?),
            "channels" => channels = string_list(value, "channels")?,
            "dependencies" => dependencies = string_list(value, "dependencies")?,
            _ => return Err(EnvironmentParseError::UnknownField(key)),
        }
    }
    Ok(EnvironmentSpec {
        name: name.ok_or(EnvironmentParseError::MissingField("name"))?,
        image: image.ok_or(EnvironmentParseError::MissingField("image"))?,
        channels,
        dependencies,
    })
}

fn scalar_string(value: Yaml, field: &'static str) -> Result<String, EnvironmentParseError> {
    match value {
        Yaml::String(s) => Ok(s),
        _ => Err(EnvironmentParseError::InvalidField { field, reason: "must be a string" }),
    }
}

fn string_list(value: Yaml, field: &'static str) -> Result<Vec<String>, EnvironmentParseError> {
    match value {
        Yaml::Null => Ok(Vec::new()),
        Yaml::Sequence(items) => items
            .into_iter()
            .map(|item| match item {
                Yaml::String(s) => Ok(s),
                _ => Err(EnvironmentParseError::InvalidField { field, reason: "must be a list of strings" }),
            })
            .collect(),
        _ => Err(EnvironmentParseError::InvalidField { field, reason: "must be a list of strings" }),
    }
}

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("environment `{0}` not found")]
    NotFound(String),
    #[error("environment `{0}` already exists")]
    Conflict(String),
    #[error("environment `{0}` is referenced by a running experiment")]
    InUse(String),
    #[error("invalid environment: {0}")]
    ValidationFailed(String),
    #[error(transparent)]
    Parse(#[from] EnvironmentParseError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EnvironmentError {
    pub fn code(&self) -> &'static str {
        match self {
            EnvironmentError::NotFound(_) => "NotFound",
            EnvironmentError::Conflict(_) => "Conflict",
            EnvironmentError::InUse(_) => "InUse",
            EnvironmentError::ValidationFailed(_) => "ValidationFailed",
            EnvironmentError::Parse(e) => e.code(),
            EnvironmentError::Store(_) => "StoreError",
        }
    }
}

pub struct EnvironmentRegistry {
    store: Arc<Store>,
    environments: RwLock<BTreeMap<String, EnvironmentSpec>>,
}

impl EnvironmentRegistry {
    pub fn new(store: Arc<Store>, environments: BTreeMap<String, EnvironmentSpec>) -> Self {
        EnvironmentRegistry { store, environments: RwLock::new(environments) }
    }

    pub fn register(&self, env: EnvironmentSpec) -> Result<EnvironmentSpec, EnvironmentError> {
        if !is_dns_label(&env.name) {
            return Err(EnvironmentError::ValidationFailed(format!(
                "name `{}` must match [a-z0-9]([-a-z0-9]*[a-z0-9])?",
                env.name
            )));
        }
        if env.image.trim().is_empty() {
            return Err(EnvironmentError::ValidationFailed("image must not be empty".into()));
        }
        let mut envs = self.environments.write();
        if envs.contains_key(&env.name) {
            return Err(EnvironmentError::Conflict(env.name));
        }
        self.store.append(&Mutation::PutEnvironment(env.clone()))?;
        envs.insert(env.name.clone(), env.clone());
        Ok(env)
    }

    pub fn get(&self, name: &str) -> Result<EnvironmentSpec, EnvironmentError> {
        self.environments.read().get(name).cloned().ok_or_else(|| EnvironmentError::NotFound(name.to_string()))
    }

    pub fn list(&self) -> Vec<EnvironmentSpec> {
        self.environments.read().values().cloned().collect()
    }

    /// Removes `name` unless `in_use` reports a live reference. The check
    /// runs under the registry write lock so it cannot race a resolution.
    pub fn delete(&self, name: &str, in_use: impl FnOnce(&str) -> bool) -> Result<(), EnvironmentError> {
        let mut envs = self.environments.write();
        if !envs.contains_key(name) {
            return Err(EnvironmentError::NotFound(name.to_string()));
        }
        if in_use(name) {
            return Err(EnvironmentError::InUse(name.to_string()));
        }
        self.store.append(&Mutation::DeleteEnvironment { name: name.to_string() })?;
        envs.remove(name);
        Ok(())
    }

    /// Read guard held across experiment creation so a concurrent delete
    /// observes the new reference.
    pub(crate) fn read(&self) -> RwLockReadGuard<'_, BTreeMap<String, EnvironmentSpec>> {
        self.environments.read()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file() {
        let env = parse_environment_yaml(
            "name: tf-env\nimage: submarine:tf-mnist\nchannels: [defaults]\ndependencies: [python=3.8, tensorflow]",
        )
        .unwrap();
        assert_eq!(
            env,
            EnvironmentSpec {
                name: "tf-env".into(),
                image: "submarine:tf-mnist".into(),
                channels: vec!["defaults".into()],
                dependencies: vec!["python=3.8".into(), "tensorflow".into()],
            }
        );
    }

    #[test]
    fn minimal_file() {
        let env = parse_environment_yaml("name: e\nimage: i").unwrap();
        assert_eq!(env.name, "e");
        assert_eq!(env.image, "i");
        assert!(env.channels.is_empty() && env.dependencies.is_empty());
    }

    #[test]
    fn errors() {
        assert_eq!(parse_environment_yaml("image: i"), Err(EnvironmentParseError::MissingField("name")));
        assert_eq!(parse_environment_yaml("name: n"), Err(EnvironmentParseError::MissingField("image")));
        assert_eq!(
            parse_environment_yaml("name: n\nimage: i\nvm: x"),
            Err(EnvironmentParseError::UnknownField("vm".into()))
        );
        assert!(matches!(parse_environment_yaml("name: [unclosed"), Err(EnvironmentParseError::YamlSyntax(_))));
        assert!(matches!(
            parse_environment_yaml("name: n\nimage: i\ndependencies: [3.10]"),
            Err(EnvironmentParseError::InvalidField { field: "dependencies", .. })
        ));
    }

    #[test]
    fn block_sequences() {
        let env = parse_environment_yaml("name: e\nimage: i\ndependencies:\n  - numpy>=1.20\n  - pip\n").unwrap();
        assert_eq!(env.dependencies, ["numpy>=1.20", "pip"]);
    }
}
