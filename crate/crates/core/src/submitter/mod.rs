//! The submitter seam: backends turn an accepted experiment into running
//! tasks and report back through a [`Monitor`].

mod local;
mod simulated;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ExperimentStatus;
use crate::experiment::{ExperimentError, ExperimentRecord, Telemetry, TelemetryAck};

pub use local::{LocalConfig, LocalSubmitter, DEFAULT_MAX_REPLICAS};
pub use simulated::{SimulatedSubmitter, DEFAULT_SIM_DURATION_MS, SIM_DURATION_KEY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Local,
    Simulated,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Local => "local",
            BackendKind::Simulated => "simulated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionHandle {
    pub experiment_id: String,
    pub backend: BackendKind,
    pub backend_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitSummary {
    pub all_zero: bool,
    /// Exit code per task instance; `None` when ended by a signal or never run.
    pub codes: BTreeMap<String, Option<i32>>,
}

/// The backend's own view of a submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state")]
pub enum BackendView {
    Pending,
    Running,
    Exited(ExitSummary),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("resource spec unsupported: {0}")]
    ResourceSpecUnsupported(String),
    #[error("unknown submission handle `{0}`")]
    UnknownHandle(String),
}

impl SubmitError {
    pub fn code(&self) -> &'static str {
        match self {
            SubmitError::BackendUnavailable(_) => "BackendUnavailable",
            SubmitError::ResourceSpecUnsupported(_) => "ResourceSpecUnsupported",
            SubmitError::UnknownHandle(_) => "UnknownHandle",
        }
    }
}

/// Where backends report lifecycle changes. Status changes go only through
/// [`Monitor::transition`], which enforces the legal transition graph.
pub trait Monitor: Send + Sync {
    fn transition(&self, id: &str, status: ExperimentStatus, reason: &str) -> Result<(), ExperimentError>;
    fn telemetry(&self, id: &str, telemetry: Telemetry) -> Result<TelemetryAck, ExperimentError>;
    fn placement(&self, id: &str, placement: BTreeMap<String, String>) -> Result<(), ExperimentError>;
}

pub trait Submitter: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Starts placement or execution and returns without waiting for it.
    fn submit(&self, record: &ExperimentRecord) -> Result<SubmissionHandle, SubmitError>;

    fn poll(&self, handle: &SubmissionHandle) -> Result<BackendView, SubmitError>;

    /// Stops every task of the submission. Returns once they are gone.
    fn kill(&self, handle: &SubmissionHandle) -> Result<(), SubmitError>;
}
