use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scenario::FaultSpec;
use crate::storage::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultEvent {
    NodeFailed(NodeId),
    PartitionStarted,
    PartitionEnded,
}

/// Side of a network partition an id falls on; the far side is odd ids.
pub fn far_side(id: u64) -> bool {
    id % 2 == 1
}

/// Fault events for one tick. Node failures are drawn once per epoch, on
/// the epoch's first tick, independently per node.
pub fn inject_faults(
    spec: &FaultSpec,
    tick: u64,
    tick_ms: u64,
    nodes: &[NodeId],
    rng: &mut ChaCha8Rng,
) -> Vec<FaultEvent> {
    let now = tick * tick_ms;
    let mut events = Vec::new();
    let epoch_ms = ((spec.epoch_h * 3_600_000.0) as u64).max(tick_ms);
    if spec.node_failure_prob > 0.0 && now % epoch_ms < tick_ms {
        for &n in nodes {
            if rng.gen::<f64>() < spec.node_failure_prob {
                events.push(FaultEvent::NodeFailed(n));
            }
        }
    }
    let was = tick > 0 && spec.partitioned(now - tick_ms);
    match (was, spec.partitioned(now)) {
        (false, true) => events.push(FaultEvent::PartitionStarted),
        (true, false) => events.push(FaultEvent::PartitionEnded),
        _ => {}
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurabilityEstimate {
    pub epochs: u64,
    pub losses: u64,
    pub predicted: f64,
    pub observed: f64,
    /// Standard error of the observed frequency under the prediction.
    pub std_error: f64,
}

impl DurabilityEstimate {
    pub fn within_sigmas(&self, k: f64) -> bool {
        (self.observed - self.predicted).abs() <= k * self.std_error
    }
}

/// Places `replicas` copies of one partition on distinct nodes and counts
/// the epochs in which every copy fails.
pub fn durability_monte_carlo(node_failure_prob: f64, replicas: u32, epochs: u64, rng: &mut ChaCha8Rng) -> DurabilityEstimate {
    let spec = FaultSpec {
        node_failure_prob,
        epoch_h: 1.0,
        partitions: Vec::new(),
    };
    let nodes: Vec<NodeId> = (0..replicas).collect();
    let mut losses = 0;
    for epoch in 0..epochs {
        let failed = inject_faults(&spec, epoch, 3_600_000, &nodes, rng)
            .iter()
            .filter(|e| matches!(e, FaultEvent::NodeFailed(_)))
            .count();
        if failed == nodes.len() {
            losses += 1;
        }
    }
    let predicted = node_failure_prob.powi(replicas as i32);
    DurabilityEstimate {
        epochs,
        losses,
        predicted,
        observed: losses as f64 / epochs as f64,
        std_error: (predicted * (1.0 - predicted) / epochs as f64).sqrt(),
    }
}
