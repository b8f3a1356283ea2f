use std::collections::HashMap;
use std::sync::Weak;

use parking_lot::Mutex;

use super::{BackendKind, BackendView, ExitSummary, Monitor, SubmissionHandle, SubmitError, Submitter};
use crate::cluster::{ClusterError, ClusterSim, ClusterSnapshot, JobView, SimEffect, SimJob};
use crate::domain::{aggregate_demand, EventKind, ExperimentStatus, ResourceSpec};
use crate::experiment::{ExperimentRecord, Telemetry};

pub const SIM_DURATION_KEY: &str = "sim.duration_ms";
pub const DEFAULT_SIM_DURATION_MS: u64 = 1000;

/// Backend that places experiments on a [`ClusterSim`]. Simulated time only
/// moves through [`SimulatedSubmitter::tick`].
pub struct SimulatedSubmitter {
    // Held while effects are reported so that reports reach the monitor in
    // simulation order. The monitor never calls back into the submitter.
    cluster: Mutex<ClusterSim>,
    monitor: Weak<dyn Monitor>,
    handles: Mutex<HashMap<String, String>>,
}

impl SimulatedSubmitter {
    pub fn new(cluster: ClusterSim, monitor: Weak<dyn Monitor>) -> Self {
        SimulatedSubmitter { cluster: Mutex::new(cluster), monitor, handles: Mutex::new(HashMap::new()) }
    }

    fn report(&self, effects: Vec<SimEffect>) {
        let Some(monitor) = self.monitor.upgrade() else { return };
        for effect in effects {
            let result = match effect {
                SimEffect::Started { id, placement } => {
                    let detail = placement
                        .assignments
                        .iter()
                        .map(|(task, a)| format!("{task}@{}", a.node_id))
                        .collect::<Vec<_>>()
                        .join(",");
                    let nodes = placement.node_map();
                    monitor
                        .placement(&id, nodes)
                        .and_then(|_| monitor.telemetry(&id, Telemetry::Event { kind: EventKind::Scheduled, detail }))
                        .and_then(|_| monitor.transition(&id, ExperimentStatus::Running, "gang placed"))
                }
                SimEffect::Queued { id } => monitor.transition(&id, ExperimentStatus::Queued, "waiting for capacity"),
                SimEffect::Completed { id, tasks } => tasks
                    .into_iter()
                    .try_for_each(|task| {
                        let detail = format!("{task} exited with code 0");
                        monitor.telemetry(&id, Telemetry::Event { kind: EventKind::TaskFinished, detail }).map(|_| ())
                    })
                    .and_then(|_| monitor.transition(&id, ExperimentStatus::Succeeded, "simulated duration elapsed")),
                SimEffect::Failed { id, reason } => monitor
                    .telemetry(&id, Telemetry::Event { kind: EventKind::Error, detail: reason.clone() })
                    .and_then(|_| monitor.transition(&id, ExperimentStatus::Failed, &reason)),
            };
            if let Err(err) = result {
                tracing::debug!(%err, "dropping simulator report");
            }
        }
    }

    /// Advances simulated time by `dt_ms`.
    pub fn tick(&self, dt_ms: u64) -> Vec<SimEffect> {
        let mut cluster = self.cluster.lock();
        let effects = cluster.tick(dt_ms);
        self.report(effects.clone());
        effects
    }

    pub fn add_node(&self, id: String, capacity: ResourceSpec) -> Result<ClusterSnapshot, ClusterError> {
        let mut cluster = self.cluster.lock();
        let effects = cluster.add_node(id, capacity)?;
        self.report(effects);
        Ok(cluster.snapshot())
    }

    pub fn remove_node(&self, id: &str) -> Result<ClusterSnapshot, ClusterError> {
        let mut cluster = self.cluster.lock();
        let effects = cluster.remove_node(id)?;
        self.report(effects);
        Ok(cluster.snapshot())
    }

    pub fn snapshot(&self) -> ClusterSnapshot {
        self.cluster.lock().snapshot()
    }
}

fn duration_of(record: &ExperimentRecord) -> Result<u64, SubmitError> {
    match record.spec.conf.get(SIM_DURATION_KEY) {
        None => Ok(DEFAULT_SIM_DURATION_MS),
        Some(raw) => raw
            .trim()
            .parse()
            .map_err(|_| SubmitError::ResourceSpecUnsupported(format!("{SIM_DURATION_KEY}={raw} is not a duration"))),
    }
}

impl Submitter for SimulatedSubmitter {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }

    fn submit(&self, record: &ExperimentRecord) -> Result<SubmissionHandle, SubmitError> {
        let demand =
            aggregate_demand(&record.spec).map_err(|e| SubmitError::ResourceSpecUnsupported(e.to_string()))?;
        let job = SimJob { id: record.id.clone(), instances: demand.instances(), duration_ms: duration_of(record)? };
        if self.monitor.upgrade().is_none() {
            return Err(SubmitError::BackendUnavailable("monitor is gone".into()));
        }
        let token = format!("sim-{}", record.id);
        let mut cluster = self.cluster.lock();
        let effects = cluster.submit(job).map_err(|e| SubmitError::BackendUnavailable(e.to_string()))?;
        self.handles.lock().insert(token.clone(), record.id.clone());
        self.report(effects);
        Ok(SubmissionHandle { experiment_id: record.id.clone(), backend: BackendKind::Simulated, backend_token: token })
    }

    fn poll(&self, handle: &SubmissionHandle) -> Result<BackendView, SubmitError> {
        let id = self
            .handles
            .lock()
            .get(&handle.backend_token)
            .cloned()
            .ok_or_else(|| SubmitError::UnknownHandle(handle.backend_token.clone()))?;
        let cluster = self.cluster.lock();
        Ok(match cluster.job_view(&id) {
            Some(JobView::Queued) | None => BackendView::Pending,
            Some(JobView::Running) => BackendView::Running,
            Some(JobView::Completed) => {
                BackendView::Exited(ExitSummary { all_zero: true, codes: Default::default() })
            }
            Some(JobView::Failed | JobView::Cancelled) => {
                BackendView::Exited(ExitSummary { all_zero: false, codes: Default::default() })
            }
        })
    }

    fn kill(&self, handle: &SubmissionHandle) -> Result<(), SubmitError> {
        let id = self
            .handles
            .lock()
            .get(&handle.backend_token)
            .cloned()
            .ok_or_else(|| SubmitError::UnknownHandle(handle.backend_token.clone()))?;
        let mut cluster = self.cluster.lock();
        match cluster.cancel(&id) {
            Ok(effects) => {
                self.report(effects);
                Ok(())
            }
            // Already finished or failed inside the simulator.
            Err(ClusterError::UnknownJob(_)) => Ok(()),
            Err(e) => Err(SubmitError::BackendUnavailable(e.to_string())),
        }
    }
}
