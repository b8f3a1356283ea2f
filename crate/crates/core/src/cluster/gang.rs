//! All-or-nothing placement of a job's task instances onto nodes.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{ResourceSpec, TaskInstance};

/// Below these sizes a heuristic `Infeasible` is confirmed by exhaustive search.
pub const EXACT_MAX_INSTANCES: usize = 12;
pub const EXACT_MAX_NODES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub node_id: String,
    pub resources: ResourceSpec,
}

/// Task instance id to node, for every instance of one job.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub assignments: BTreeMap<String, Assignment>,
}

impl Placement {
    pub fn node_map(&self) -> BTreeMap<String, String> {
        self.assignments.iter().map(|(task, a)| (task.clone(), a.node_id.clone())).collect()
    }

    pub fn total(&self) -> ResourceSpec {
        self.assignments.values().fold(ResourceSpec::ZERO, |acc, a| acc + a.resources)
    }
}

/// Free capacity of one node as seen by the scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeFree {
    pub id: String,
    pub free: ResourceSpec,
}

fn order_instances(instances: &[TaskInstance]) -> Vec<&TaskInstance> {
    let mut ordered: Vec<&TaskInstance> = instances.iter().collect();
    ordered.sort_by(|a, b| {
        b.resources
            .gpu
            .cmp(&a.resources.gpu)
            .then(b.resources.memory_mib.cmp(&a.resources.memory_mib))
    });
    ordered
}

/// Places every instance or none.
///
/// Instances go largest first (GPU, then memory); each takes the feasible node
/// that leaves the least free GPU, then the least free memory, then the lowest
/// node id. If that greedy pass fails on a small enough problem the verdict is
/// checked by exhaustive search, so below [`EXACT_MAX_INSTANCES`] and
/// [`EXACT_MAX_NODES`] `None` means no assignment exists. `nodes` should be
/// ordered by id.
pub fn gang_schedule(instances: &[TaskInstance], nodes: &[NodeFree]) -> Option<Placement> {
    if instances.is_empty() {
        return Some(Placement::default());
    }
    if !fits_in_aggregate(instances, nodes) {
        return None;
    }
    let ordered = order_instances(instances);
    if let Some(p) = best_fit(&ordered, nodes) {
        return Some(p);
    }
    if instances.len() <= EXACT_MAX_INSTANCES && nodes.len() <= EXACT_MAX_NODES {
        return exhaustive(&ordered, nodes);
    }
    None
}

fn fits_in_aggregate(instances: &[TaskInstance], nodes: &[NodeFree]) -> bool {
    let sum = |it: &mut dyn Iterator<Item = ResourceSpec>| {
        it.fold((0u64, 0u64, 0u128), |(c, g, m), r| (c + u64::from(r.vcores), g + u64::from(r.gpu), m + u128::from(r.memory_mib)))
    };
    let need = sum(&mut instances.iter().map(|i| i.resources));
    let have = sum(&mut nodes.iter().map(|n| n.free));
    need.0 <= have.0 && need.1 <= have.1 && need.2 <= have.2
}

fn best_fit(ordered: &[&TaskInstance], nodes: &[NodeFree]) -> Option<Placement> {
    let mut free: Vec<ResourceSpec> = nodes.iter().map(|n| n.free).collect();
    let mut placement = Placement::default();
    for inst in ordered {
        let need = inst.resources;
        let mut best: Option<(usize, (u32, u64))> = None;
        for (i, f) in free.iter().enumerate() {
            if !need.fits_within(f) {
                continue;
            }
            let score = (f.gpu - need.gpu, f.memory_mib - need.memory_mib);
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((i, score));
            }
        }
        // Tentative allocations live only in `free`; dropping it releases them.
        let (i, _) = best?;
        free[i] = free[i] - need;
        placement
            .assignments
            .insert(inst.id.clone(), Assignment { node_id: nodes[i].id.clone(), resources: need });
    }
    Some(placement)
}

/// Depth-first search over instance-to-node assignments. Nodes with identical
/// remaining capacity are interchangeable, and failed (depth, capacity
/// multiset) states are memoised.
fn exhaustive(ordered: &[&TaskInstance], nodes: &[NodeFree]) -> Option<Placement> {
    struct Search<'a> {
        ordered: &'a [&'a TaskInstance],
        free: Vec<ResourceSpec>,
        chosen: Vec<usize>,
        dead: HashSet<(usize, Vec<ResourceSpec>)>,
    }

    impl Search<'_> {
        fn key(&self, depth: usize) -> (usize, Vec<ResourceSpec>) {
            let mut caps = self.free.clone();
            caps.sort_by_key(|r| (r.vcores, r.gpu, r.memory_mib));
            (depth, caps)
        }

        fn go(&mut self, depth: usize) -> bool {
            if depth == self.ordered.len() {
                return true;
            }
            let key = self.key(depth);
            if self.dead.contains(&key) {
                return false;
            }
            let need = self.ordered[depth].resources;
            for i in 0..self.free.len() {
                if !need.fits_within(&self.free[i]) || self.free[..i].contains(&self.free[i]) {
                    continue;
                }
                self.free[i] = self.free[i] - need;
                self.chosen.push(i);
                if self.go(depth + 1) {
                    return true;
                }
                self.chosen.pop();
                self.free[i] = self.free[i] + need;
            }
            self.dead.insert(key);
            false
        }
    }

    let mut search = Search {
        ordered,
        free: nodes.iter().map(|n| n.free).collect(),
        chosen: Vec::with_capacity(ordered.len()),
        dead: HashSet::new(),
    };
    if !search.go(0) {
        return None;
    }
    let assignments = ordered
        .iter()
        .zip(&search.chosen)
        .map(|(inst, &i)| (inst.id.clone(), Assignment { node_id: nodes[i].id.clone(), resources: inst.resources }))
        .collect();
    Some(Placement { assignments })
}
