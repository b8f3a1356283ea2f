//! Request and response bodies shared by the REST server and its clients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::template::ParamValue;

pub const API_PREFIX: &str = "/api/v1";

/// Body of `POST /experiment/from-template/{name}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FromTemplateRequest {
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl FromTemplateRequest {
    pub fn string_params(&self) -> BTreeMap<String, String> {
        self.params.iter().map(|(k, v)| (k.clone(), v.to_string())).collect()
    }
}

/// Body of `POST /cluster`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusterAction {
    AddNode { id: String, resources: String },
    RemoveNode { id: String },
    Tick { dt_ms: u64 },
}

/// Error payload of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}
