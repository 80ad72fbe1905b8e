//! Deterministic discrete-time simulation of a deployment under load.

mod cluster;
mod faults;
mod metrics;
mod oracle;
mod run;
mod scenario;

pub use cluster::{rebalance, Cluster};
pub use faults::{durability_monte_carlo, far_side, inject_faults, DurabilityEstimate, FaultEvent};
pub use metrics::{evaluate, Check, MetricsError, MetricsLog, MetricsRow, Summary, HEADER};
pub use oracle::{oracle_index, oracle_indices};
pub use run::{run, stream, RunOutput, SimError};
pub use scenario::{
    split_templates, Acceptance, ControllerConfig, FaultSpec, NodeRatioCheck, PartitionWindow, Scenario,
    ScenarioError, ScenarioFile, ServiceModel, Spike, WorkloadSpec,
};
