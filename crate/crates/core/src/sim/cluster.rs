use std::collections::BTreeMap;

use crate::pipeline::Database;
use crate::storage::NodeId;

/// Nodes and their boot times.
#[derive(Debug, Clone, Default)]
pub struct Cluster {
    nodes: BTreeMap<NodeId, u64>,
    next_id: NodeId,
}

impl Cluster {
    /// `n` nodes ready at time zero.
    pub fn new(n: u32) -> Self {
        let mut c = Cluster::default();
        c.add(n, 0);
        c
    }

    pub fn add(&mut self, n: u32, ready_at: u64) -> Vec<NodeId> {
        (0..n)
            .map(|_| {
                let id = self.next_id;
                self.next_id += 1;
                self.nodes.insert(id, ready_at);
                id
            })
            .collect()
    }

    /// Removes up to `n` nodes, newest first, keeping at least `keep`.
    pub fn remove(&mut self, n: u32, keep: u32) -> Vec<NodeId> {
        let removable = (self.nodes.len() as u32).saturating_sub(keep).min(n);
        let victims: Vec<NodeId> = self.nodes.keys().rev().take(removable as usize).copied().collect();
        for v in &victims {
            self.nodes.remove(v);
        }
        victims
    }

    pub fn fail(&mut self, node: NodeId) -> bool {
        self.nodes.remove(&node).is_some()
    }

    pub fn len(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn all(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn ready(&self, now: u64) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, &t)| t <= now)
            .map(|(&n, _)| n)
            .collect()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains_key(&node)
    }
}

fn replica_load(db: &Database, ready: &[NodeId]) -> BTreeMap<NodeId, usize> {
    let mut load: BTreeMap<NodeId, usize> = ready.iter().map(|&n| (n, 0)).collect();
    for s in db.stores() {
        for p in s.partitions() {
            for n in p.nodes() {
                if let Some(l) = load.get_mut(&n) {
                    *l += 1;
                }
            }
        }
    }
    load
}

/// Splits oversized partitions, drops replicas on departed nodes, restores
/// `replicas` copies per partition on ready nodes and evens out replica
/// counts. Returns bytes moved.
pub fn rebalance(db: &mut Database, cluster: &Cluster, now: u64, replicas: u32, split_rows: usize) -> u64 {
    let ready = cluster.ready(now);
    let mut moved = 0;
    for store in db.stores_mut() {
        let oversized: Vec<u64> = store
            .partitions()
            .iter()
            .filter(|p| p.len() > split_rows)
            .map(|p| p.id)
            .collect();
        for id in oversized {
            if let Some(at) = store.split_point(id) {
                if let Ok((_, _, bytes)) = store.split_partition(id, at) {
                    moved += bytes;
                }
            }
        }
        let ids: Vec<u64> = store.partitions().iter().map(|p| p.id).collect();
        for id in ids {
            let gone: Vec<NodeId> = store
                .partition(id)
                .map(|p| p.nodes().filter(|n| !cluster.contains(*n)).collect())
                .unwrap_or_default();
            for n in gone {
                let _ = store.remove_replica(id, n);
            }
        }
    }
    if ready.is_empty() {
        return moved;
    }
    let want = (replicas as usize).min(ready.len());
    let mut load = replica_load(db, &ready);
    for store in db.stores_mut() {
        let ids: Vec<u64> = store.partitions().iter().map(|p| p.id).collect();
        for id in ids {
            loop {
                let p = store.partition(id).expect("listed partition");
                if p.replicas.len() >= want {
                    break;
                }
                let target = load
                    .iter()
                    .filter(|(n, _)| p.replica(**n).is_none())
                    .min_by_key(|(n, l)| (**l, **n))
                    .map(|(n, _)| *n);
                let Some(node) = target else { break };
                moved += store.add_replica(id, node).unwrap_or(0);
                *load.get_mut(&node).expect("ready node") += 1;
            }
        }
    }
    // even out: move one replica at a time from the busiest to the idlest node
    for _ in 0..10_000 {
        let (&hi, &hi_load) = load.iter().max_by_key(|(n, l)| (**l, std::cmp::Reverse(**n))).expect("ready nodes");
        let (&lo, &lo_load) = load.iter().min_by_key(|(n, l)| (**l, **n)).expect("ready nodes");
        if hi_load <= lo_load + 1 {
            break;
        }
        let mut done = false;
        for store in db.stores_mut() {
            let pick = store
                .partitions()
                .iter()
                .find(|p| p.replica(hi).is_some() && p.replica(lo).is_none())
                .map(|p| p.id);
            if let Some(id) = pick {
                moved += store.add_replica(id, lo).unwrap_or(0);
                let _ = store.remove_replica(id, hi);
                done = true;
                break;
            }
        }
        if !done {
            break;
        }
        *load.get_mut(&hi).expect("ready") -= 1;
        *load.get_mut(&lo).expect("ready") += 1;
    }
    moved
}
