use std::fmt;

use serde::{Deserialize, Serialize};

/// Lifecycle status of an experiment.
///
/// ```text
/// Accepted -> Queued | Running | Failed | Killed
/// Queued   -> Running | Failed | Killed
/// Running  -> Succeeded | Failed | Killed
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentStatus {
    Accepted,
    Queued,
    Running,
    Succeeded,
    Failed,
    Killed,
}

impl ExperimentStatus {
    pub const ALL: [ExperimentStatus; 6] = [
        ExperimentStatus::Accepted,
        ExperimentStatus::Queued,
        ExperimentStatus::Running,
        ExperimentStatus::Succeeded,
        ExperimentStatus::Failed,
        ExperimentStatus::Killed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, ExperimentStatus::Succeeded | ExperimentStatus::Failed | ExperimentStatus::Killed)
    }

    pub fn can_transition_to(self, next: ExperimentStatus) -> bool {
        use ExperimentStatus::*;
        matches!(
            (self, next),
            (Accepted, Queued | Running | Failed | Killed)
                | (Queued, Running | Failed | Killed)
                | (Running, Succeeded | Failed | Killed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentStatus::Accepted => "Accepted",
            ExperimentStatus::Queued => "Queued",
            ExperimentStatus::Running => "Running",
            ExperimentStatus::Succeeded => "Succeeded",
            ExperimentStatus::Failed => "Failed",
            ExperimentStatus::Killed => "Killed",
        }
    }

    pub fn parse(s: &str) -> Option<ExperimentStatus> {
        ExperimentStatus::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for ExperimentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    StatusChange,
    Scheduled,
    TaskStarted,
    TaskFinished,
    LogLine,
    Error,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: u64,
    pub kind: EventKind,
    pub detail: String,
    /// Set when the event arrived after the experiment reached a terminal status.
    #[serde(default, skip_serializing_if = "is_false")]
    pub late: bool,
}

impl Event {
    pub fn new(timestamp: u64, kind: EventKind, detail: impl Into<String>) -> Self {
        Event { timestamp, kind, detail: detail.into(), late: false }
    }

    /// For a `StatusChange` event, the status it records (`"<Status>: reason"`).
    pub fn status_change(&self) -> Option<ExperimentStatus> {
        if self.kind != EventKind::StatusChange {
            return None;
        }
        let head = self.detail.split(':').next().unwrap_or_default();
        ExperimentStatus::parse(head.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub key: String,
    pub value: f64,
    pub step: u64,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub late: bool,
}
