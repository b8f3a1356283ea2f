//! Experiment manager and monitor: validation, persistence, lifecycle and
//! telemetry ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::{Arc, Weak};

use indexmap::IndexMap;
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::now_millis;
use crate::domain::{
    aggregate_demand, validate_experiment_spec, EnvironmentRef, Event, EventKind, ExperimentSpec, ExperimentStatus,
    MetricPoint, Violation,
};
use crate::environment::{EnvironmentRegistry, EnvironmentSpec};
use crate::store::{Mutation, Store, StoreError};
use crate::submitter::{BackendView, Monitor, SubmissionHandle, SubmitError, Submitter};
use crate::template::{TemplateError, TemplateRegistry};

pub const ORPHANED_AT_RESTART: &str = "orphaned at restart";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateProvenance {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub spec: ExperimentSpec,
    pub resolved_image: String,
    /// The registered environment the spec named, copied at creation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateProvenance>,
    pub status: ExperimentStatus,
    pub events: Vec<Event>,
    pub metrics: Vec<MetricPoint>,
    /// Task instance (`Worker-0`) to captured output lines.
    pub logs: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<BTreeMap<String, String>>,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    pub artifact_uris: Vec<String>,
}

/// One persisted change to a record. Replay and live updates share
/// [`ExperimentRecord::apply`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RecordChange {
    Status { status: ExperimentStatus, event: Event, finished_at: Option<u64> },
    Event { event: Event },
    Metric { metric: MetricPoint },
    Log { task: String, line: String, event: Event },
    Placement { placement: BTreeMap<String, String> },
    Artifact { uri: String },
}

impl ExperimentRecord {
    pub fn apply(&mut self, change: RecordChange) {
        match change {
            RecordChange::Status { status, event, finished_at } => {
                self.status = status;
                self.events.push(event);
                self.finished_at = finished_at;
            }
            RecordChange::Event { event } => self.events.push(event),
            RecordChange::Metric { metric } => self.metrics.push(metric),
            RecordChange::Log { task, line, event } => {
                self.logs.entry(task).or_default().push(line);
                self.events.push(event);
            }
            RecordChange::Placement { placement } => self.placement = Some(placement),
            RecordChange::Artifact { uri } => self.artifact_uris.push(uri),
        }
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }

    pub fn summary(&self) -> ExperimentSummary {
        ExperimentSummary {
            id: self.id.clone(),
            name: self.spec.meta.name.clone(),
            namespace: self.spec.meta.namespace.clone(),
            status: self.status,
            created_at: self.created_at,
        }
    }

    /// Statuses in the order their `StatusChange` events were recorded.
    pub fn status_path(&self) -> Vec<ExperimentStatus> {
        self.events.iter().filter_map(Event::status_change).collect()
    }

    /// Logs as plain text, one `==> task <==` section per task instance.
    pub fn logs_text(&self) -> String {
        let mut out = String::new();
        for (task, lines) in &self.logs {
            let _ = writeln!(out, "==> {task} <==");
            for line in lines {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub id: String,
    pub name: String,
    pub namespace: String,
    pub status: ExperimentStatus,
    pub created_at: u64,
}

/// Monitor input: an event, a metric, a log line, or an artifact URI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Telemetry {
    Event {
        kind: EventKind,
        detail: String,
    },
    Metric {
        key: String,
        value: f64,
        #[serde(default)]
        step: u64,
        #[serde(default)]
        timestamp: Option<u64>,
    },
    Log {
        task: String,
        line: String,
    },
    Artifact {
        uri: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetryAck {
    /// The experiment was already terminal when this arrived.
    pub late: bool,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment `{0}` not found")]
    NotFound(String),
    #[error("experiment spec is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Violation>),
    #[error("environment `{0}` is not registered")]
    EnvironmentNotFound(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: ExperimentStatus, to: ExperimentStatus },
    #[error("experiment `{0}` is already terminal")]
    AlreadyTerminal(String),
    #[error("metric `{0}` is not a finite number")]
    NonFiniteMetric(String),
    #[error("invalid telemetry: {0}")]
    InvalidTelemetry(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ExperimentError {
    pub fn code(&self) -> &'static str {
        match self {
            ExperimentError::NotFound(_) => "NotFound",
            ExperimentError::ValidationFailed(_) => "ValidationFailed",
            ExperimentError::EnvironmentNotFound(_) => "EnvironmentNotFound",
            ExperimentError::IllegalTransition { .. } => "IllegalTransition",
            ExperimentError::AlreadyTerminal(_) => "AlreadyTerminal",
            ExperimentError::NonFiniteMetric(_) => "NonFiniteMetric",
            ExperimentError::InvalidTelemetry(_) => "InvalidTelemetry",
            ExperimentError::Template(e) => e.code(),
            ExperimentError::Submit(e) => e.code(),
            ExperimentError::Store(_) => "StoreError",
        }
    }
}

/// `exp-` followed by 12 hex digits from the OS-seeded CSPRNG.
pub fn new_experiment_id() -> String {
    let mut bytes = [0u8; 6];
    rand::rng().fill_bytes(&mut bytes);
    format!("exp-{}", hex::encode(bytes))
}

type Shared = Arc<Mutex<ExperimentRecord>>;

pub struct ExperimentManager {
    store: Arc<Store>,
    templates: Arc<TemplateRegistry>,
    environments: Arc<EnvironmentRegistry>,
    records: RwLock<IndexMap<String, Shared>>,
    submitter: Arc<dyn Submitter>,
    handles: Mutex<HashMap<String, SubmissionHandle>>,
}

impl ExperimentManager {
    /// Builds the manager over replayed records. `make_submitter` receives the
    /// monitor endpoint backends report through. Records left non-terminal by
    /// a previous process are failed as orphans.
    pub fn open(
        store: Arc<Store>,
        records: IndexMap<String, ExperimentRecord>,
        templates: Arc<TemplateRegistry>,
        environments: Arc<EnvironmentRegistry>,
        make_submitter: impl FnOnce(Weak<dyn Monitor>) -> Arc<dyn Submitter>,
    ) -> Result<Arc<Self>, ExperimentError> {
        let orphans: Vec<String> =
            records.values().filter(|r| !r.status.is_terminal()).map(|r| r.id.clone()).collect();
        let manager = Arc::new_cyclic(|weak: &Weak<ExperimentManager>| {
            let monitor: Weak<dyn Monitor> = weak.clone();
            ExperimentManager {
                store,
                templates,
                environments,
                records: RwLock::new(records.into_iter().map(|(id, r)| (id, Arc::new(Mutex::new(r)))).collect()),
                submitter: make_submitter(monitor),
                handles: Mutex::new(HashMap::new()),
            }
        });
        for id in orphans {
            tracing::warn!(%id, "failing experiment orphaned at restart");
            manager.transition_status(&id, ExperimentStatus::Failed, ORPHANED_AT_RESTART)?;
        }
        Ok(manager)
    }

    pub fn submitter(&self) -> &Arc<dyn Submitter> {
        &self.submitter
    }

    fn shared(&self, id: &str) -> Result<Shared, ExperimentError> {
        self.records.read().get(id).cloned().ok_or_else(|| ExperimentError::NotFound(id.to_string()))
    }

    pub fn create_experiment(&self, spec: ExperimentSpec) -> Result<ExperimentRecord, ExperimentError> {
        self.create(spec, None)
    }

    pub fn create_from_template(
        &self,
        name: &str,
        params: BTreeMap<String, String>,
    ) -> Result<ExperimentRecord, ExperimentError> {
        let spec = self.templates.instantiate(name, &params)?;
        self.create(spec, Some(TemplateProvenance { name: name.to_string(), params }))
    }

    fn create(
        &self,
        spec: ExperimentSpec,
        template: Option<TemplateProvenance>,
    ) -> Result<ExperimentRecord, ExperimentError> {
        let mut violations = validate_experiment_spec(&spec);
        if violations.is_empty() {
            if let Err(overflow) = aggregate_demand(&spec) {
                violations.push(Violation::new(format!("tasks.{}", overflow.role), overflow.to_string()));
            }
        }
        if !violations.is_empty() {
            return Err(ExperimentError::ValidationFailed(violations));
        }

        let snapshot = {
            let envs = self.environments.read();
            let (resolved_image, environment) = match &spec.environment {
                EnvironmentRef::Image(image) => (image.clone(), None),
                EnvironmentRef::Name(name) => {
                    let env = envs.get(name).ok_or_else(|| ExperimentError::EnvironmentNotFound(name.clone()))?;
                    (env.image.clone(), Some(env.clone()))
                }
            };
            let mut records = self.records.write();
            let id = loop {
                let id = new_experiment_id();
                if !records.contains_key(&id) {
                    break id;
                }
            };
            let now = now_millis();
            let record = ExperimentRecord {
                id: id.clone(),
                spec,
                resolved_image,
                environment,
                template,
                status: ExperimentStatus::Accepted,
                events: vec![Event::new(now, EventKind::StatusChange, "Accepted: submitted")],
                metrics: Vec::new(),
                logs: BTreeMap::new(),
                placement: None,
                created_at: now,
                finished_at: None,
                artifact_uris: Vec::new(),
            };
            self.store.append(&Mutation::CreateExperiment(Box::new(record.clone())))?;
            records.insert(id, Arc::new(Mutex::new(record.clone())));
            record
        };

        match self.submitter.submit(&snapshot) {
            Ok(handle) => {
                self.handles.lock().insert(snapshot.id.clone(), handle.clone());
                // A kill that raced the submit found no handle; stop the backend now.
                if self.get(&snapshot.id)?.status == ExperimentStatus::Killed {
                    let _ = self.submitter.kill(&handle);
                }
            }
            Err(err) => {
                let reason = err.to_string();
                self.append_telemetry(&snapshot.id, Telemetry::Event { kind: EventKind::Error, detail: reason.clone() })?;
                match self.transition_status(&snapshot.id, ExperimentStatus::Failed, &reason) {
                    Ok(_) | Err(ExperimentError::IllegalTransition { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(snapshot)
    }

    pub fn transition_status(
        &self,
        id: &str,
        next: ExperimentStatus,
        reason: &str,
    ) -> Result<ExperimentRecord, ExperimentError> {
        let shared = self.shared(id)?;
        let mut record = shared.lock();
        if !record.status.can_transition_to(next) {
            return Err(ExperimentError::IllegalTransition { from: record.status, to: next });
        }
        let now = now_millis();
        let detail = if reason.is_empty() { next.to_string() } else { format!("{next}: {reason}") };
        let change = RecordChange::Status {
            status: next,
            event: Event::new(now, EventKind::StatusChange, detail),
            finished_at: next.is_terminal().then_some(now),
        };
        self.store.append(&Mutation::UpdateExperiment { id: id.to_string(), change: change.clone() })?;
        record.apply(change);
        Ok(record.clone())
    }

    /// Appends monitor input in arrival order. Input for a terminal record is
    /// kept but flagged late.
    pub fn append_telemetry(&self, id: &str, telemetry: Telemetry) -> Result<TelemetryAck, ExperimentError> {
        let shared = self.shared(id)?;
        let mut record = shared.lock();
        let late = record.status.is_terminal();
        let now = now_millis();
        let change = match telemetry {
            Telemetry::Event { kind: EventKind::StatusChange, .. } => {
                return Err(ExperimentError::InvalidTelemetry("StatusChange events are recorded by transitions".into()))
            }
            Telemetry::Event { kind, detail } => RecordChange::Event { event: Event { timestamp: now, kind, detail, late } },
            Telemetry::Metric { key, value, step, timestamp } => {
                if !value.is_finite() {
                    return Err(ExperimentError::NonFiniteMetric(key));
                }
                RecordChange::Metric { metric: MetricPoint { key, value, step, timestamp: timestamp.unwrap_or(now), late } }
            }
            Telemetry::Log { task, line } => {
                if task.is_empty() {
                    return Err(ExperimentError::InvalidTelemetry("log task must not be empty".into()));
                }
                let event = Event { timestamp: now, kind: EventKind::LogLine, detail: format!("{task}: {line}"), late };
                RecordChange::Log { task, line, event }
            }
            Telemetry::Artifact { uri } => RecordChange::Artifact { uri },
        };
        self.store.append(&Mutation::UpdateExperiment { id: id.to_string(), change: change.clone() })?;
        record.apply(change);
        Ok(TelemetryAck { late })
    }

    pub fn record_placement(&self, id: &str, placement: BTreeMap<String, String>) -> Result<(), ExperimentError> {
        let shared = self.shared(id)?;
        let mut record = shared.lock();
        let change = RecordChange::Placement { placement };
        self.store.append(&Mutation::UpdateExperiment { id: id.to_string(), change: change.clone() })?;
        record.apply(change);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<ExperimentRecord, ExperimentError> {
        Ok(self.shared(id)?.lock().clone())
    }

    /// Summaries, newest first, optionally filtered by namespace.
    pub fn list(&self, namespace: Option<&str>, limit: Option<usize>) -> Vec<ExperimentSummary> {
        let records: Vec<Shared> = self.records.read().values().cloned().collect();
        let mut out: Vec<(usize, ExperimentSummary)> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.lock().summary()))
            .filter(|(_, s)| namespace.is_none_or(|ns| s.namespace == ns))
            .collect();
        out.sort_by(|(ia, a), (ib, b)| b.created_at.cmp(&a.created_at).then(ib.cmp(ia)));
        out.into_iter().map(|(_, s)| s).take(limit.unwrap_or(usize::MAX)).collect()
    }

    /// Stops the backend and marks the experiment Killed.
    pub fn kill(&self, id: &str) -> Result<ExperimentRecord, ExperimentError> {
        let status = self.shared(id)?.lock().status;
        if status.is_terminal() {
            return Err(ExperimentError::AlreadyTerminal(id.to_string()));
        }
        let handle = self.handles.lock().get(id).cloned();
        if let Some(handle) = handle {
            match self.submitter.kill(&handle) {
                Ok(()) | Err(SubmitError::UnknownHandle(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        match self.transition_status(id, ExperimentStatus::Killed, "killed by user") {
            Err(ExperimentError::IllegalTransition { .. }) => Err(ExperimentError::AlreadyTerminal(id.to_string())),
            other => other,
        }
    }

    pub fn poll(&self, id: &str) -> Result<BackendView, ExperimentError> {
        let handle = self.handles.lock().get(id).cloned().ok_or_else(|| SubmitError::UnknownHandle(id.to_string()))?;
        Ok(self.submitter.poll(&handle)?)
    }

    pub fn logs(&self, id: &str) -> Result<String, ExperimentError> {
        Ok(self.shared(id)?.lock().logs_text())
    }

    /// True if a non-terminal experiment names environment `env`.
    pub fn environment_in_use(&self, env: &str) -> bool {
        let records: Vec<Shared> = self.records.read().values().cloned().collect();
        records.iter().any(|r| {
            let r = r.lock();
            !r.status.is_terminal() && matches!(&r.spec.environment, EnvironmentRef::Name(n) if n == env)
        })
    }

    pub fn records(&self) -> Vec<ExperimentRecord> {
        let records: Vec<Shared> = self.records.read().values().cloned().collect();
        records.iter().map(|r| r.lock().clone()).collect()
    }
}

impl Monitor for ExperimentManager {
    fn transition(&self, id: &str, status: ExperimentStatus, reason: &str) -> Result<(), ExperimentError> {
        self.transition_status(id, status, reason).map(|_| ())
    }

    fn telemetry(&self, id: &str, telemetry: Telemetry) -> Result<TelemetryAck, ExperimentError> {
        self.append_telemetry(id, telemetry)
    }

    fn placement(&self, id: &str, placement: BTreeMap<String, String>) -> Result<(), ExperimentError> {
        self.record_placement(id, placement)
    }
}
