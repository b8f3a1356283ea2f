use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use super::resources::{parse_resource_string, ResourceSpec};

pub const DEFAULT_NAMESPACE: &str = "default";
pub const MAX_NAME_LEN: usize = 63;

fn default_namespace() -> String {
    DEFAULT_NAMESPACE.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMeta {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_namespace")]
    pub namespace: String,
    #[serde(default)]
    pub framework: String,
    #[serde(default)]
    pub cmd: String,
}

impl ExperimentMeta {
    pub fn new(name: impl Into<String>) -> Self {
        ExperimentMeta {
            name: name.into(),
            namespace: default_namespace(),
            framework: String::new(),
            cmd: String::new(),
        }
    }
}

/// Either a registered environment name or an inline image reference.
/// Encoded as `{"name": ..}` or `{"image": ..}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvironmentRef {
    Name(String),
    Image(String),
}

impl EnvironmentRef {
    pub fn value(&self) -> &str {
        match self {
            EnvironmentRef::Name(s) | EnvironmentRef::Image(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExperimentTaskSpec {
    pub replicas: u32,
    pub resources: ResourceSpec,
    #[serde(rename = "cmd", skip_serializing_if = "Option::is_none")]
    pub launch_cmd_override: Option<String>,
}

impl ExperimentTaskSpec {
    pub fn new(replicas: u32, resources: ResourceSpec) -> Self {
        ExperimentTaskSpec { replicas, resources, launch_cmd_override: None }
    }

    pub fn with_cmd(mut self, cmd: impl Into<String>) -> Self {
        self.launch_cmd_override = Some(cmd.into());
        self
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskSpec {
    replicas: Option<u32>,
    resources: String,
    cmd: Option<String>,
}

/// `replicas` may be given as a field, inline in the resource string, or both
/// when they agree.
impl<'de> Deserialize<'de> for ExperimentTaskSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = RawTaskSpec::deserialize(deserializer)?;
        let req = parse_resource_string(&raw.resources).map_err(D::Error::custom)?;
        let replicas = match (raw.replicas, req.replicas) {
            (Some(a), Some(b)) if a != b => {
                return Err(D::Error::custom(format!(
                    "replicas field ({a}) disagrees with resource string ({b})"
                )))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(D::Error::missing_field("replicas")),
        };
        Ok(ExperimentTaskSpec { replicas, resources: req.resources, launch_cmd_override: raw.cmd })
    }
}

/// A runnable experiment: metadata, environment and per-role task specs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub meta: ExperimentMeta,
    pub environment: EnvironmentRef,
    #[serde(rename = "spec", deserialize_with = "deserialize_unique_roles")]
    pub tasks: BTreeMap<String, ExperimentTaskSpec>,
    /// Opaque `key=value` configuration; `sim.duration_ms` is read by the simulator.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conf: BTreeMap<String, String>,
    #[serde(default, rename = "placementConstraints", skip_serializing_if = "Option::is_none")]
    pub placement_constraints: Option<String>,
    #[serde(default, rename = "trainingData", skip_serializing_if = "Option::is_none")]
    pub training_data: Option<String>,
}

fn deserialize_unique_roles<'de, D>(deserializer: D) -> Result<BTreeMap<String, ExperimentTaskSpec>, D::Error>
where
    D: Deserializer<'de>,
{
    struct RoleMap;

    impl<'de> Visitor<'de> for RoleMap {
        type Value = BTreeMap<String, ExperimentTaskSpec>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a map of role name to task spec")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((role, task)) = access.next_entry::<String, ExperimentTaskSpec>()? {
                if out.contains_key(&role) {
                    return Err(serde::de::Error::custom(format!("duplicate role `{role}`")));
                }
                out.insert(role, task);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(RoleMap)
}

impl ExperimentSpec {
    pub fn new(meta: ExperimentMeta, environment: EnvironmentRef) -> Self {
        ExperimentSpec {
            meta,
            environment,
            tasks: BTreeMap::new(),
            conf: BTreeMap::new(),
            placement_constraints: None,
            training_data: None,
        }
    }

    pub fn with_task(mut self, role: impl Into<String>, task: ExperimentTaskSpec) -> Self {
        self.tasks.insert(role.into(), task);
        self
    }

    /// Canonical JSON: fixed field order, sorted maps, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serialization is infallible")
    }

    /// Command a replica of `role` runs: the role override, else `meta.cmd`.
    pub fn launch_cmd(&self, role: &str) -> &str {
        self.tasks
            .get(role)
            .and_then(|t| t.launch_cmd_override.as_deref())
            .unwrap_or(&self.meta.cmd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// DNS-label style: `[a-z0-9]([-a-z0-9]*[a-z0-9])?`, at most 63 chars.
pub fn is_dns_label(s: &str) -> bool {
    let bytes = s.as_bytes();
    let edge = |b: u8| b.is_ascii_lowercase() || b.is_ascii_digit();
    !bytes.is_empty()
        && bytes.len() <= MAX_NAME_LEN
        && edge(bytes[0])
        && edge(bytes[bytes.len() - 1])
        && bytes.iter().all(|&b| edge(b) || b == b'-')
}

/// Role names: `[A-Za-z][A-Za-z0-9_-]*`, at most 63 chars.
pub fn is_role_name(s: &str) -> bool {
    let bytes = s.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= MAX_NAME_LEN
        && bytes[0].is_ascii_alphabetic()
        && bytes.iter().all(|&b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Every violated invariant of `spec`; empty means valid.
pub fn validate_experiment_spec(spec: &ExperimentSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let meta = &spec.meta;
    if meta.name.is_empty() {
        out.push(Violation::new("meta.name", "must not be empty"));
    } else if !is_dns_label(&meta.name) {
        out.push(Violation::new(
            "meta.name",
            "must match [a-z0-9]([-a-z0-9]*[a-z0-9])? and be at most 63 characters",
        ));
    }
    if meta.namespace.is_empty() {
        out.push(Violation::new("meta.namespace", "must not be empty"));
    } else if !is_dns_label(&meta.namespace) {
        out.push(Violation::new(
            "meta.namespace",
            "must match [a-z0-9]([-a-z0-9]*[a-z0-9])? and be at most 63 characters",
        ));
    }
    if spec.environment.value().trim().is_empty() {
        out.push(Violation::new("environment", "environment reference must not be empty"));
    }
    if spec.tasks.is_empty() {
        out.push(Violation::new("tasks", "at least one task role"));
    }
    for (role, task) in &spec.tasks {
        if !is_role_name(role) {
            out.push(Violation::new(
                format!("tasks.{role}"),
                "role must match [A-Za-z][A-Za-z0-9_-]* and be at most 63 characters",
            ));
        }
        if task.replicas == 0 {
            out.push(Violation::new(format!("tasks.{role}.replicas"), "replicas must be at least 1"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoleDemand {
    pub replicas: u32,
    pub resources: ResourceSpec,
}

/// Full simultaneous demand of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Demand {
    pub roles: BTreeMap<String, RoleDemand>,
    pub totals: ResourceSpec,
}

/// One replica of one role, e.g. `Worker-3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: String,
    pub role: String,
    pub rank: u32,
    pub resources: ResourceSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("resource totals overflowed for role `{role}`")]
pub struct ArithmeticOverflow {
    pub role: String,
}

pub fn aggregate_demand(spec: &ExperimentSpec) -> Result<Demand, ArithmeticOverflow> {
    let mut roles = BTreeMap::new();
    let mut totals = ResourceSpec::ZERO;
    for (role, task) in &spec.tasks {
        let overflow = || ArithmeticOverflow { role: role.clone() };
        let role_total = task.resources.checked_mul(task.replicas).ok_or_else(overflow)?;
        totals = totals.checked_add(&role_total).ok_or_else(overflow)?;
        roles.insert(role.clone(), RoleDemand { replicas: task.replicas, resources: task.resources });
    }
    Ok(Demand { roles, totals })
}

impl Demand {
    pub fn instance_count(&self) -> usize {
        self.roles.values().map(|r| r.replicas as usize).sum()
    }

    pub fn instances(&self) -> Vec<TaskInstance> {
        self.roles
            .iter()
            .flat_map(|(role, d)| {
                (0..d.replicas).map(move |rank| TaskInstance {
                    id: format!("{role}-{rank}"),
                    role: role.clone(),
                    rank,
                    resources: d.resources,
                })
            })
            .collect()
    }
}
