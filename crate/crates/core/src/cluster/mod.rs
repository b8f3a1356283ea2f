//! Simulated multi-node cluster with gang scheduling and a strict FIFO queue.
//!
//! The simulator is a deterministic state machine over simulated
//! milliseconds. Every operation returns the lifecycle [`SimEffect`]s it
//! caused, in order, so a backend can forward them to the monitor.

mod gang;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{parse_resource_string, ResourceError, ResourceSpec, TaskInstance};

pub use gang::{gang_schedule, Assignment, NodeFree, Placement, EXACT_MAX_INSTANCES, EXACT_MAX_NODES};

pub const EXCEEDS_CAPACITY: &str = "exceeds cluster capacity";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: String,
    pub capacity: ResourceSpec,
    pub allocated: ResourceSpec,
    /// `<job>/<task instance>` ids.
    pub running_tasks: BTreeSet<String>,
}

impl NodeState {
    pub fn free(&self) -> ResourceSpec {
        self.capacity - self.allocated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimJob {
    pub id: String,
    pub instances: Vec<TaskInstance>,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningJob {
    pub placement: Placement,
    pub started_at: u64,
    pub finishes_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect")]
pub enum SimEffect {
    Started { id: String, placement: Placement },
    Queued { id: String },
    Completed { id: String, tasks: Vec<String> },
    Failed { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobView {
    Queued,
    Running,
    Completed,
    Failed,
    Cancelled,
}

/// Consistent copy of the whole cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub clock: u64,
    pub nodes: Vec<NodeState>,
    pub queue: Vec<String>,
    pub running: BTreeMap<String, RunningJob>,
}

impl ClusterSnapshot {
    /// Checks allocation bounds, conservation and gang completeness.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut allocated = ResourceSpec::ZERO;
        for n in &self.nodes {
            if !n.allocated.fits_within(&n.capacity) {
                return Err(format!("node {} over-allocated", n.node_id));
            }
            allocated = allocated + n.allocated;
        }
        let placed = self.running.values().fold(ResourceSpec::ZERO, |acc, j| acc + j.placement.total());
        if allocated != placed {
            return Err(format!("allocated {allocated} != placed {placed}"));
        }
        let tasks: usize = self.nodes.iter().map(|n| n.running_tasks.len()).sum();
        let instances: usize = self.running.values().map(|j| j.placement.assignments.len()).sum();
        if tasks != instances {
            return Err(format!("{tasks} node tasks for {instances} placed instances"));
        }
        for (job, run) in &self.running {
            for (task, a) in &run.placement.assignments {
                let node = self.nodes.iter().find(|n| n.node_id == a.node_id).ok_or("placement on missing node")?;
                if !node.running_tasks.contains(&format!("{job}/{task}")) {
                    return Err(format!("{job}/{task} missing from {}", a.node_id));
                }
            }
            if self.queue.contains(job) {
                return Err(format!("{job} both queued and placed"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("node `{0}` already exists")]
    DuplicateNodeId(String),
    #[error("node `{0}` has running tasks")]
    Refused(String),
    #[error("node `{0}` not found")]
    UnknownNode(String),
    #[error("job `{0}` not found")]
    UnknownJob(String),
    #[error("job `{0}` already submitted")]
    DuplicateJob(String),
}

impl ClusterError {
    pub fn code(&self) -> &'static str {
        match self {
            ClusterError::DuplicateNodeId(_) => "DuplicateNodeId",
            ClusterError::Refused(_) => "Refused",
            ClusterError::UnknownNode(_) | ClusterError::UnknownJob(_) => "NotFound",
            ClusterError::DuplicateJob(_) => "Conflict",
        }
    }
}

#[derive(Debug, Default)]
pub struct ClusterSim {
    nodes: BTreeMap<String, NodeState>,
    queue: VecDeque<SimJob>,
    running: BTreeMap<String, RunningJob>,
    finished: HashMap<String, JobView>,
    clock: u64,
    start_seq: u64,
    start_order: HashMap<String, u64>,
}

impl ClusterSim {
    pub fn new() -> Self {
        ClusterSim::default()
    }

    pub fn with_nodes(nodes: impl IntoIterator<Item = (String, ResourceSpec)>) -> Result<Self, ClusterError> {
        let mut sim = ClusterSim::new();
        for (id, cap) in nodes {
            sim.add_node(id, cap)?;
        }
        Ok(sim)
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn free_nodes(&self) -> Vec<NodeFree> {
        self.nodes.values().map(|n| NodeFree { id: n.node_id.clone(), free: n.free() }).collect()
    }

    fn capacities(&self) -> Vec<NodeFree> {
        self.nodes.values().map(|n| NodeFree { id: n.node_id.clone(), free: n.capacity }).collect()
    }

    fn fits_empty_cluster(&self, job: &SimJob) -> bool {
        gang_schedule(&job.instances, &self.capacities()).is_some()
    }

    fn allocate(&mut self, job: &SimJob, placement: Placement) -> SimEffect {
        for (task, a) in &placement.assignments {
            let node = self.nodes.get_mut(&a.node_id).expect("placement targets a known node");
            node.allocated = node.allocated + a.resources;
            node.running_tasks.insert(format!("{}/{task}", job.id));
        }
        self.start_seq += 1;
        self.start_order.insert(job.id.clone(), self.start_seq);
        self.running.insert(
            job.id.clone(),
            RunningJob {
                placement: placement.clone(),
                started_at: self.clock,
                finishes_at: self.clock.saturating_add(job.duration_ms),
            },
        );
        SimEffect::Started { id: job.id.clone(), placement }
    }

    fn release(&mut self, id: &str) -> Option<RunningJob> {
        let run = self.running.remove(id)?;
        self.start_order.remove(id);
        for (task, a) in &run.placement.assignments {
            if let Some(node) = self.nodes.get_mut(&a.node_id) {
                node.allocated = node.allocated - a.resources;
                node.running_tasks.remove(&format!("{id}/{task}"));
            }
        }
        Some(run)
    }

    /// Starts queued jobs from the head while they fit. Never skips the head.
    fn drain_queue(&mut self, effects: &mut Vec<SimEffect>) {
        while let Some(head) = self.queue.front() {
            let Some(placement) = gang_schedule(&head.instances, &self.free_nodes()) else {
                break;
            };
            let job = self.queue.pop_front().expect("queue head exists");
            effects.push(self.allocate(&job, placement));
        }
    }

    fn known(&self, id: &str) -> bool {
        self.running.contains_key(id) || self.queue.iter().any(|j| j.id == id)
    }

    /// Places the job now, queues it behind earlier waiters, or fails it if it
    /// could not fit even on an empty cluster.
    pub fn submit(&mut self, job: SimJob) -> Result<Vec<SimEffect>, ClusterError> {
        if self.known(&job.id) {
            return Err(ClusterError::DuplicateJob(job.id));
        }
        if !self.fits_empty_cluster(&job) {
            self.finished.insert(job.id.clone(), JobView::Failed);
            return Ok(vec![SimEffect::Failed { id: job.id, reason: EXCEEDS_CAPACITY.into() }]);
        }
        if self.queue.is_empty() {
            if let Some(placement) = gang_schedule(&job.instances, &self.free_nodes()) {
                return Ok(vec![self.allocate(&job, placement)]);
            }
        }
        let id = job.id.clone();
        self.queue.push_back(job);
        Ok(vec![SimEffect::Queued { id }])
    }

    /// Advances the clock, completes due jobs and refills from the queue.
    pub fn tick(&mut self, dt_ms: u64) -> Vec<SimEffect> {
        let mut effects = Vec::new();
        if dt_ms == 0 {
            return effects;
        }
        self.clock = self.clock.saturating_add(dt_ms);
        let mut due: Vec<(u64, u64, String)> = self
            .running
            .iter()
            .filter(|(_, r)| r.finishes_at <= self.clock)
            .map(|(id, r)| (r.finishes_at, self.start_order[id], id.clone()))
            .collect();
        due.sort();
        for (_, _, id) in due {
            let run = self.release(&id).expect("due job is running");
            self.finished.insert(id.clone(), JobView::Completed);
            effects.push(SimEffect::Completed { id, tasks: run.placement.assignments.into_keys().collect() });
        }
        self.drain_queue(&mut effects);
        effects
    }

    /// Removes a queued or running job, releasing its resources.
    pub fn cancel(&mut self, id: &str) -> Result<Vec<SimEffect>, ClusterError> {
        let mut effects = Vec::new();
        if self.release(id).is_some() {
            self.finished.insert(id.to_string(), JobView::Cancelled);
        } else if let Some(pos) = self.queue.iter().position(|j| j.id == id) {
            self.queue.remove(pos);
            self.finished.insert(id.to_string(), JobView::Cancelled);
        } else {
            return Err(ClusterError::UnknownJob(id.to_string()));
        }
        self.drain_queue(&mut effects);
        Ok(effects)
    }

    pub fn add_node(&mut self, id: String, capacity: ResourceSpec) -> Result<Vec<SimEffect>, ClusterError> {
        if self.nodes.contains_key(&id) {
            return Err(ClusterError::DuplicateNodeId(id));
        }
        self.nodes.insert(
            id.clone(),
            NodeState { node_id: id, capacity, allocated: ResourceSpec::ZERO, running_tasks: BTreeSet::new() },
        );
        let mut effects = Vec::new();
        self.drain_queue(&mut effects);
        Ok(effects)
    }

    /// Removes an idle node. Queued jobs that no longer fit the shrunken
    /// cluster even when empty are failed.
    pub fn remove_node(&mut self, id: &str) -> Result<Vec<SimEffect>, ClusterError> {
        let node = self.nodes.get(id).ok_or_else(|| ClusterError::UnknownNode(id.to_string()))?;
        if !node.running_tasks.is_empty() {
            return Err(ClusterError::Refused(id.to_string()));
        }
        self.nodes.remove(id);
        let mut effects = Vec::new();
        let queued = std::mem::take(&mut self.queue);
        for job in queued {
            if self.fits_empty_cluster(&job) {
                self.queue.push_back(job);
            } else {
                self.finished.insert(job.id.clone(), JobView::Failed);
                effects.push(SimEffect::Failed { id: job.id, reason: EXCEEDS_CAPACITY.into() });
            }
        }
        self.drain_queue(&mut effects);
        Ok(effects)
    }

    pub fn job_view(&self, id: &str) -> Option<JobView> {
        if self.running.contains_key(id) {
            Some(JobView::Running)
        } else if self.queue.iter().any(|j| j.id == id) {
            Some(JobView::Queued)
        } else {
            self.finished.get(id).copied()
        }
    }

    pub fn running_placement(&self, id: &str) -> Option<&Placement> {
        self.running.get(id).map(|r| &r.placement)
    }

    pub fn snapshot(&self) -> ClusterSnapshot {
        ClusterSnapshot {
            clock: self.clock,
            nodes: self.nodes.values().cloned().collect(),
            queue: self.queue.iter().map(|j| j.id.clone()).collect(),
            running: self.running.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeConfig {
    id: String,
    resources: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterConfig {
    nodes: Vec<NodeConfig>,
}

#[derive(Debug, Error)]
pub enum ClusterConfigError {
    #[error("invalid cluster config: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("node `{node}`: {source}")]
    Resources {
        node: String,
        #[source]
        source: ResourceError,
    },
    #[error("node `{0}`: replicas is not a node resource")]
    Replicas(String),
}

/// Parses the cluster YAML:
///
/// ```yaml
/// nodes:
///   - id: node-0
///     resources: "cpu=16,gpu=4,memory=32G"
/// ```
pub fn parse_cluster_config(text: &str) -> Result<Vec<(String, ResourceSpec)>, ClusterConfigError> {
    let config: ClusterConfig = serde_yaml::from_str(text)?;
    config
        .nodes
        .into_iter()
        .map(|n| {
            let req = parse_resource_string(&n.resources)
                .map_err(|source| ClusterConfigError::Resources { node: n.id.clone(), source })?;
            if req.replicas.is_some() {
                return Err(ClusterConfigError::Replicas(n.id));
            }
            Ok((n.id, req.resources))
        })
        .collect()
}

/// Four nodes of `cpu=16,gpu=4,memory=32G`, used when no config is given.
pub fn default_cluster() -> Vec<(String, ResourceSpec)> {
    (0..4).map(|i| (format!("node-{i}"), ResourceSpec::new(16, 4, 32 * 1024))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str, n: u32, r: ResourceSpec, duration_ms: u64) -> SimJob {
        let instances = (0..n)
            .map(|rank| TaskInstance { id: format!("Worker-{rank}"), role: "Worker".into(), rank, resources: r })
            .collect();
        SimJob { id: id.into(), instances, duration_ms }
    }

    fn cluster(n: usize) -> ClusterSim {
        ClusterSim::with_nodes((0..n).map(|i| (format!("node-{i}"), ResourceSpec::new(16, 4, 32768)))).unwrap()
    }

    #[test]
    fn second_whole_cluster_job_waits() {
        let mut sim = cluster(2);
        let whole = ResourceSpec::new(16, 4, 32768);
        assert!(matches!(sim.submit(job("a", 2, whole, 1000)).unwrap()[..], [SimEffect::Started { .. }]));
        assert_eq!(sim.submit(job("b", 2, whole, 1000)).unwrap(), vec![SimEffect::Queued { id: "b".into() }]);
        assert!(sim.tick(999).is_empty());
        let effects = sim.tick(1);
        assert!(matches!(&effects[0], SimEffect::Completed { id, .. } if id == "a"));
        assert!(matches!(&effects[1], SimEffect::Started { id, .. } if id == "b"));
        sim.snapshot().check_invariants().unwrap();
    }

    #[test]
    fn oversized_job_fails_immediately() {
        let mut sim = cluster(2);
        let effects = sim.submit(job("big", 4, ResourceSpec::new(4, 4, 4096), 1000)).unwrap();
        assert_eq!(effects, vec![SimEffect::Failed { id: "big".into(), reason: EXCEEDS_CAPACITY.into() }]);
        assert_eq!(sim.job_view("big"), Some(JobView::Failed));
    }

    #[test]
    fn zero_tick_is_a_no_op() {
        let mut sim = cluster(1);
        sim.submit(job("a", 1, ResourceSpec::new(1, 0, 0), 0)).unwrap();
        let before = sim.snapshot();
        assert!(sim.tick(0).is_empty());
        assert_eq!(sim.snapshot(), before);
    }

    #[test]
    fn node_admin() {
        let mut sim = cluster(2);
        assert_eq!(
            sim.add_node("node-0".into(), ResourceSpec::ZERO),
            Err(ClusterError::DuplicateNodeId("node-0".into()))
        );
        sim.submit(job("a", 1, ResourceSpec::new(16, 4, 32768), 100)).unwrap();
        let busy = sim.snapshot().nodes.iter().find(|n| !n.running_tasks.is_empty()).unwrap().node_id.clone();
        assert_eq!(sim.remove_node(&busy), Err(ClusterError::Refused(busy.clone())));
        assert_eq!(sim.remove_node("nope"), Err(ClusterError::UnknownNode("nope".into())));
    }

    #[test]
    fn removing_capacity_fails_or_queues() {
        let mut sim = cluster(2);
        let whole = ResourceSpec::new(16, 4, 32768);
        // fill node-0 so the 2-node job must wait
        sim.submit(job("a", 1, whole, 100)).unwrap();
        assert_eq!(sim.submit(job("b", 2, whole, 100)).unwrap(), vec![SimEffect::Queued { id: "b".into() }]);
        let idle = sim.snapshot().nodes.iter().find(|n| n.running_tasks.is_empty()).unwrap().node_id.clone();
        let effects = sim.remove_node(&idle).unwrap();
        assert_eq!(effects, vec![SimEffect::Failed { id: "b".into(), reason: EXCEEDS_CAPACITY.into() }]);
        // a 1-node job now queues behind the running one
        assert_eq!(sim.submit(job("c", 1, whole, 100)).unwrap(), vec![SimEffect::Queued { id: "c".into() }]);
        let effects = sim.tick(100);
        assert!(matches!(&effects[1], SimEffect::Started { id, .. } if id == "c"));
    }

    #[test]
    fn strict_fifo_no_skipping() {
        let mut sim = cluster(1);
        sim.submit(job("a", 1, ResourceSpec::new(8, 0, 0), 100)).unwrap();
        assert!(matches!(sim.submit(job("b", 1, ResourceSpec::new(16, 0, 0), 100)).unwrap()[..], [SimEffect::Queued { .. }]));
        // c would fit beside a, but b is ahead of it
        assert!(matches!(sim.submit(job("c", 1, ResourceSpec::new(1, 0, 0), 100)).unwrap()[..], [SimEffect::Queued { .. }]));
        let started: Vec<_> = sim
            .tick(100)
            .into_iter()
            .filter_map(|e| match e {
                SimEffect::Started { id, .. } => Some(id),
                _ => None,
            })
            .collect();
        assert_eq!(started, ["b"]);
    }

    #[test]
    fn cancel_releases_and_refills() {
        let mut sim = cluster(1);
        let whole = ResourceSpec::new(16, 4, 32768);
        sim.submit(job("a", 1, whole, 100)).unwrap();
        sim.submit(job("b", 1, whole, 100)).unwrap();
        let effects = sim.cancel("a").unwrap();
        assert!(matches!(&effects[..], [SimEffect::Started { id, .. }] if id == "b"));
        assert_eq!(sim.job_view("a"), Some(JobView::Cancelled));
        assert_eq!(sim.cancel("zzz"), Err(ClusterError::UnknownJob("zzz".into())));
        sim.snapshot().check_invariants().unwrap();
    }

    #[test]
    fn config_file() {
        let nodes = parse_cluster_config("nodes:\n  - id: n1\n    resources: \"cpu=16,gpu=4,memory=32G\"\n").unwrap();
        assert_eq!(nodes, vec![("n1".to_string(), ResourceSpec::new(16, 4, 32768))]);
        assert!(parse_cluster_config("nodes:\n  - id: n1\n    resources: \"cpu=1,replicas=2\"\n").is_err());
        assert!(parse_cluster_config("nodes:\n  - id: n1\n    resources: \"memory=2Q\"\n").is_err());
    }
}
