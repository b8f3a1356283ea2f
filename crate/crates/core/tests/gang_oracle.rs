use std::collections::BTreeMap;

use ctower_core::cluster::{gang_schedule, NodeFree, Placement};
use ctower_core::domain::{ResourceSpec, TaskInstance};
use proptest::prelude::*;

/// Tries every instance-to-node assignment.
fn brute_force(instances: &[TaskInstance], nodes: &[NodeFree]) -> bool {
    fn go(i: usize, instances: &[TaskInstance], free: &mut [ResourceSpec]) -> bool {
        if i == instances.len() {
            return true;
        }
        let need = instances[i].resources;
        for n in 0..free.len() {
            if need.fits_within(&free[n]) {
                free[n] = free[n] - need;
                let ok = go(i + 1, instances, free);
                free[n] = free[n] + need;
                if ok {
                    return true;
                }
            }
        }
        false
    }
    let mut free: Vec<ResourceSpec> = nodes.iter().map(|n| n.free).collect();
    go(0, instances, &mut free)
}

fn check_placement(p: &Placement, instances: &[TaskInstance], nodes: &[NodeFree]) -> Result<(), String> {
    if p.assignments.len() != instances.len() {
        return Err("partial placement".into());
    }
    let mut used: BTreeMap<&str, ResourceSpec> = BTreeMap::new();
    for inst in instances {
        let a = p.assignments.get(&inst.id).ok_or("instance missing")?;
        if a.resources != inst.resources {
            return Err("resources changed".into());
        }
        let u = used.entry(a.node_id.as_str()).or_insert(ResourceSpec::ZERO);
        *u = *u + inst.resources;
    }
    for (node, u) in used {
        let n = nodes.iter().find(|n| n.id == node).ok_or("unknown node")?;
        if !u.fits_within(&n.free) {
            return Err(format!("{node} over capacity"));
        }
    }
    Ok(())
}

fn problem() -> impl Strategy<Value = (Vec<TaskInstance>, Vec<NodeFree>)> {
    let res = |c: u32, g: u32, m: u64| (0..=c, 0..=g, 0..=m).prop_map(|(c, g, m)| ResourceSpec::new(c, g, m));
    let instances = prop::collection::vec(res(6, 3, 8), 1..=7).prop_map(|rs| {
        rs.into_iter()
            .enumerate()
            .map(|(i, r)| TaskInstance { id: format!("T-{i}"), role: "T".into(), rank: i as u32, resources: r })
            .collect()
    });
    let nodes = prop::collection::vec(res(12, 6, 16), 1..=4).prop_map(|rs| {
        rs.into_iter().enumerate().map(|(i, free)| NodeFree { id: format!("n{i}"), free }).collect()
    });
    (instances, nodes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn agrees_with_brute_force((instances, nodes) in problem()) {
        let got = gang_schedule(&instances, &nodes);
        prop_assert_eq!(got.is_some(), brute_force(&instances, &nodes));
        if let Some(p) = got {
            prop_assert_eq!(check_placement(&p, &instances, &nodes), Ok(()));
        }
    }
}
