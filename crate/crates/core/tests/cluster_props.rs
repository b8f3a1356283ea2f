use ctower_core::cluster::{ClusterSim, JobView, SimEffect, SimJob, EXCEEDS_CAPACITY};
use ctower_core::domain::{ResourceSpec, TaskInstance};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Submit { replicas: u32, res: ResourceSpec, duration: u64 },
    Tick(u64),
    Cancel(usize),
    AddNode(ResourceSpec),
    RemoveNode(usize),
}

fn op() -> impl Strategy<Value = Op> {
    let res = (0u32..8, 0u32..4, 0u64..8192).prop_map(|(c, g, m)| ResourceSpec::new(c, g, m));
    prop_oneof![
        4 => (1u32..5, res.clone(), 1u64..500).prop_map(|(replicas, res, duration)| Op::Submit { replicas, res, duration }),
        4 => (0u64..300).prop_map(Op::Tick),
        1 => any::<usize>().prop_map(Op::Cancel),
        1 => res.prop_map(|r| Op::AddNode(r + ResourceSpec::new(4, 2, 4096))),
        1 => any::<usize>().prop_map(Op::RemoveNode),
    ]
}

fn job(id: usize, replicas: u32, res: ResourceSpec, duration_ms: u64) -> SimJob {
    SimJob {
        id: format!("job-{id:04}"),
        instances: (0..replicas)
            .map(|rank| TaskInstance { id: format!("Worker-{rank}"), role: "Worker".into(), rank, resources: res })
            .collect(),
        duration_ms,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Every state satisfies the conservation invariants and jobs start in
    /// submission order.
    #[test]
    fn conservation_and_fifo(ops in prop::collection::vec(op(), 1..120)) {
        let mut sim = ClusterSim::with_nodes((0..3).map(|i| (format!("node-{i}"), ResourceSpec::new(8, 4, 16384)))).unwrap();
        let mut next_job = 0usize;
        let mut next_node = 3usize;
        let mut last_started: Option<String> = None;
        for op in ops {
            let effects = match op {
                Op::Submit { replicas, res, duration } => {
                    next_job += 1;
                    sim.submit(job(next_job, replicas, res, duration)).unwrap()
                }
                Op::Tick(dt) => sim.tick(dt),
                Op::Cancel(i) => {
                    let snap = sim.snapshot();
                    let ids: Vec<String> = snap.queue.iter().cloned().chain(snap.running.keys().cloned()).collect();
                    if ids.is_empty() { continue; }
                    let id = &ids[i % ids.len()];
                    let effects = sim.cancel(id).unwrap();
                    prop_assert_eq!(sim.job_view(id), Some(JobView::Cancelled));
                    effects
                }
                Op::AddNode(cap) => {
                    next_node += 1;
                    sim.add_node(format!("node-{next_node}"), cap).unwrap()
                }
                Op::RemoveNode(i) => {
                    let snap = sim.snapshot();
                    if snap.nodes.is_empty() { continue; }
                    let n = &snap.nodes[i % snap.nodes.len()];
                    match sim.remove_node(&n.node_id) {
                        Ok(effects) => { prop_assert!(n.running_tasks.is_empty()); effects }
                        Err(_) => { prop_assert!(!n.running_tasks.is_empty()); continue; }
                    }
                }
            };
            for e in &effects {
                match e {
                    SimEffect::Started { id, .. } => {
                        prop_assert!(last_started.as_deref() < Some(id.as_str()), "{} started after {:?}", id, last_started);
                        last_started = Some(id.clone());
                    }
                    SimEffect::Failed { reason, .. } => prop_assert_eq!(reason, EXCEEDS_CAPACITY),
                    _ => {}
                }
            }
            let snap = sim.snapshot();
            prop_assert_eq!(snap.check_invariants(), Ok(()));
            // the queue head never fits when the queue is non-empty
            if let Some(head) = snap.queue.first() {
                prop_assert_eq!(sim.job_view(head), Some(JobView::Queued));
            }
            let mut sorted = snap.queue.clone();
            sorted.sort();
            prop_assert_eq!(&sorted, &snap.queue);
        }
    }
}

#[test]
fn oversize_job_fails_immediately() {
    let mut sim = ClusterSim::with_nodes([("a".to_string(), ResourceSpec::new(4, 0, 1024))]).unwrap();
    let effects = sim.submit(job(1, 1, ResourceSpec::new(8, 0, 0), 10)).unwrap();
    assert_eq!(effects, vec![SimEffect::Failed { id: "job-0001".into(), reason: EXCEEDS_CAPACITY.into() }]);
    assert_eq!(sim.job_view("job-0001"), Some(JobView::Failed));
}

#[test]
fn queued_job_starts_when_capacity_frees() {
    let mut sim = ClusterSim::with_nodes([("a".to_string(), ResourceSpec::new(4, 0, 1024))]).unwrap();
    let r = ResourceSpec::new(4, 0, 0);
    assert!(matches!(sim.submit(job(1, 1, r, 100)).unwrap()[..], [SimEffect::Started { .. }]));
    assert!(matches!(sim.submit(job(2, 1, r, 100)).unwrap()[..], [SimEffect::Queued { .. }]));
    // a small job behind the queue must wait too
    assert!(matches!(sim.submit(job(3, 1, ResourceSpec::ZERO, 100)).unwrap()[..], [SimEffect::Queued { .. }]));
    assert!(sim.tick(99).is_empty());
    let effects = sim.tick(1);
    assert!(matches!(&effects[0], SimEffect::Completed { id, .. } if id == "job-0001"));
    assert!(matches!(&effects[1], SimEffect::Started { id, .. } if id == "job-0002"));
    assert!(matches!(&effects[2], SimEffect::Started { id, .. } if id == "job-0003"));
}
