//! Scenario files.
//!
//! A scenario is a JSON document with the sections `seed`, `duration_h`,
//! `tick_ms`, `schema`, `templates`, `spec`, `workload`, `faults`,
//! `controller`, plus optional `service` and `acceptance`. File paths are
//! relative to the scenario file. A templates file may hold several
//! templates separated by `;`.
//!
//! The service-time constants are synthetic: no measured hardware numbers
//! back them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{parse_spec, ConsistencySpec, SpecError};
use crate::query::{compile_catalog, parse_template, Catalog, CompileError, QueryTemplate, Schema, SchemaError, TemplateError, DEFAULT_BUDGET};
use crate::storage::MergeRegistry;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Json(String),
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("template `{file}`: {error}")]
    Template { file: String, error: TemplateError },
    #[error("spec: {0}")]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

fn one() -> f64 {
    1.0
}
fn day_h() -> f64 {
    24.0
}
fn default_delete_fraction() -> f64 {
    0.2
}
fn default_data_users() -> u32 {
    200
}
fn default_sample_ops() -> u32 {
    100
}
fn default_degree() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spike {
    pub start_h: f64,
    pub ramp_h: f64,
    pub multiplier: f64,
    #[serde(default)]
    pub hold_h: f64,
    #[serde(default)]
    pub decay_h: f64,
}

impl Spike {
    pub fn end_h(&self) -> f64 {
        self.start_h + self.ramp_h + self.hold_h + self.decay_h
    }

    /// Load multiplier at `h` hours: exponential growth through the ramp,
    /// flat hold, exponential decay back to 1.
    pub fn factor(&self, h: f64) -> f64 {
        let ln_m = self.multiplier.ln();
        let ramp_end = self.start_h + self.ramp_h;
        let hold_end = ramp_end + self.hold_h;
        if h < self.start_h {
            1.0
        } else if h < ramp_end {
            (ln_m * (h - self.start_h) / self.ramp_h).exp()
        } else if h < hold_end {
            self.multiplier
        } else if h < hold_end + self.decay_h {
            (ln_m * (1.0 - (h - hold_end) / self.decay_h)).exp()
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub base_users: f64,
    #[serde(default = "one")]
    pub req_per_user_s: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    #[serde(default = "day_h")]
    pub diurnal_period_h: f64,
    /// Template name to relative weight.
    pub reads: BTreeMap<String, f64>,
    /// Table name to relative weight.
    #[serde(default)]
    pub writes: BTreeMap<String, f64>,
    #[serde(default = "default_delete_fraction")]
    pub delete_fraction: f64,
    #[serde(default)]
    pub spikes: Vec<Spike>,
    /// Entities materialised in the data layer.
    #[serde(default = "default_data_users")]
    pub data_users: u32,
    /// Operations executed against real data per tick; the rest of the
    /// load is modelled analytically.
    #[serde(default = "default_sample_ops")]
    pub sample_ops_per_tick: u32,
    #[serde(default = "default_degree")]
    pub initial_degree: u32,
}

impl WorkloadSpec {
    pub fn active_users(&self, now_ms: u64) -> f64 {
        let h = now_ms as f64 / 3_600_000.0;
        let diurnal = 1.0 + self.diurnal_amplitude * (std::f64::consts::TAU * h / self.diurnal_period_h).sin();
        let spike: f64 = self.spikes.iter().map(|s| s.factor(h)).product();
        self.base_users * diurnal * spike
    }

    pub fn request_rate(&self, now_ms: u64) -> f64 {
        self.active_users(now_ms) * self.req_per_user_s
    }

    pub fn write_fraction(&self) -> f64 {
        let r: f64 = self.reads.values().sum();
        let w: f64 = self.writes.values().sum();
        if r + w == 0.0 {
            0.0
        } else {
            w / (r + w)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionWindow {
    pub start_h: f64,
    pub end_h: f64,
}

fn epoch_h() -> f64 {
    1.0
}

/// Node failures per epoch and scheduled network partitions. A partition
/// separates odd node ids and odd user ids from the even ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub node_failure_prob: f64,
    #[serde(default = "epoch_h")]
    pub epoch_h: f64,
    #[serde(default)]
    pub partitions: Vec<PartitionWindow>,
}

impl Default for FaultSpec {
    fn default() -> Self {
        FaultSpec {
            node_failure_prob: 0.0,
            epoch_h: 1.0,
            partitions: Vec::new(),
        }
    }
}

impl FaultSpec {
    pub fn partitioned(&self, now_ms: u64) -> bool {
        let h = now_ms as f64 / 3_600_000.0;
        self.partitions.iter().any(|p| p.start_h <= h && h < p.end_h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub interval_ms: u64,
    pub utilization: f64,
    pub min_nodes: u32,
    pub max_nodes: u32,
    pub initial_nodes: u32,
    pub hysteresis_ms: u64,
    pub half_life_ms: u64,
    pub safety: f64,
    pub bucket_width: f64,
    pub min_observations: usize,
    pub boot_ms: u64,
    /// Per-node failure probability assumed when sizing replica sets.
    pub node_failure_prob: f64,
    pub headroom_fraction: f64,
    pub observation_window: usize,
    pub samples_per_observation: usize,
    pub calibration_samples: usize,
    /// Rows per storage partition before it is split.
    pub split_rows: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            interval_ms: 300_000,
            utilization: 0.8,
            min_nodes: 2,
            max_nodes: 64,
            initial_nodes: 2,
            hysteresis_ms: 1_800_000,
            half_life_ms: 600_000,
            safety: 1.2,
            bucket_width: 10.0,
            min_observations: 50,
            boot_ms: 120_000,
            node_failure_prob: 0.01,
            headroom_fraction: 0.2,
            observation_window: 2000,
            samples_per_observation: 20,
            calibration_samples: 2000,
            split_rows: 512,
        }
    }
}

/// Synthetic per-node service model: an M/M/1 queue plus fixed overhead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceModel {
    /// Requests per second one node can serve.
    pub service_rate: f64,
    pub fixed_ms: f64,
    /// Primitive maintenance ops one unit of spare request capacity buys.
    pub maint_ops_per_req: f64,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel {
            service_rate: 200.0,
            fixed_ms: 5.0,
            maint_ops_per_req: 10.0,
        }
    }
}

impl ServiceModel {
    /// Latency quantile at per-node rate `lambda`; `None` when saturated.
    pub fn latency_quantile_ms(&self, lambda: f64, p: f64) -> Option<f64> {
        let slack = self.service_rate - lambda;
        (slack > 0.0).then(|| self.fixed_ms - (1.0 - p).ln() / slack * 1000.0)
    }

    /// Fraction of requests served within `bound_ms` at per-node rate `lambda`.
    pub fn success_within(&self, lambda: f64, bound_ms: f64) -> f64 {
        let slack = self.service_rate - lambda;
        if slack <= 0.0 || bound_ms <= self.fixed_ms {
            return 0.0;
        }
        1.0 - (-slack * (bound_ms - self.fixed_ms) / 1000.0).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRatioCheck {
    /// Hours after the last spike ends.
    pub settle_h: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acceptance {
    /// Defaults to the spec's availability target.
    #[serde(default)]
    pub min_success: Option<f64>,
    #[serde(default)]
    pub success_from_h: Option<f64>,
    #[serde(default)]
    pub success_to_h: Option<f64>,
    #[serde(default)]
    pub max_deadline_misses: Option<u64>,
    #[serde(default)]
    pub max_unflagged_stale: Option<u64>,
    #[serde(default)]
    pub nodes_after_spike: Option<NodeRatioCheck>,
    #[serde(default)]
    pub max_nodes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub seed: u64,
    pub duration_h: f64,
    pub tick_ms: u64,
    pub schema: String,
    pub templates: Vec<String>,
    pub spec: String,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub faults: FaultSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub service: ServiceModel,
    #[serde(default)]
    pub acceptance: Option<Acceptance>,
}

/// A scenario with its schema, templates and spec loaded and compiled.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub schema: Schema,
    pub templates: Vec<QueryTemplate>,
    pub spec: ConsistencySpec,
    pub catalog: Catalog,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Splits a templates file on `;`, skipping blank pieces.
pub fn split_templates(text: &str) -> impl Iterator<Item = &str> {
    text.split(';').map(str::trim).filter(|t| !t.is_empty())
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = read(path)?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let schema = read(&dir.join(&file.schema))?;
        let templates = file
            .templates
            .iter()
            .map(|t| Ok((t.clone(), read(&dir.join(t))?)))
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let spec = read(&dir.join(&file.spec))?;
        Scenario::from_parts(file, &schema, &templates, &spec)
    }

    /// Builds a scenario from already-read file contents; `templates` pairs
    /// a label for error messages with the file text.
    pub fn from_parts(
        file: ScenarioFile,
        schema_text: &str,
        templates: &[(String, String)],
        spec_text: &str,
    ) -> Result<Scenario, ScenarioError> {
        let schema = Schema::parse(schema_text)?;
        let mut parsed = Vec::new();
        for (label, text) in templates {
            for t in split_templates(text) {
                let tpl = parse_template(t, &schema).map_err(|error| ScenarioError::Template {
                    file: label.clone(),
                    error,
                })?;
                parsed.push(tpl);
            }
        }
        let spec = parse_spec(spec_text, &MergeRegistry::with_builtins())?;
        let catalog = compile_catalog(&parsed, &schema, DEFAULT_BUDGET)?;
        let s = Scenario {
            file,
            schema,
            templates: parsed,
            spec,
            catalog,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let f = &self.file;
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if f.tick_ms == 0 || f.duration_h.is_nan() || f.duration_h <= 0.0 {
            return bad("tick_ms and duration_h must be positive".into());
        }
        let w = &f.workload;
        if w.base_users < 0.0 || w.req_per_user_s < 0.0 || w.diurnal_amplitude < 0.0 || w.diurnal_amplitude >= 1.0 {
            return bad("workload rates must be non-negative and diurnal_amplitude below 1".into());
        }
        if w.spikes.iter().any(|s| s.multiplier < 1.0 || s.ramp_h <= 0.0 || s.hold_h < 0.0 || s.decay_h < 0.0) {
            return bad("spike multiplier must be at least 1 and durations non-negative".into());
        }
        if w.reads.values().chain(w.writes.values()).any(|&x| x < 0.0) {
            return bad("op mix weights must be non-negative".into());
        }
        if let Some(name) = w.reads.keys().find(|n| self.catalog.template(n).is_none()) {
            return bad(format!("read mix names unknown template `{name}`"));
        }
        if let Some(name) = w.writes.keys().find(|n| self.schema.table(n).is_none()) {
            return bad(format!("write mix names unknown table `{name}`"));
        }
        if w.data_users == 0 {
            return bad("data_users must be positive".into());
        }
        let p = f.faults.node_failure_prob;
        if !(0.0..1.0).contains(&p) {
            return bad("node_failure_prob must be in [0, 1)".into());
        }
        if f.faults.partitions.iter().any(|x| x.start_h < 0.0 || x.end_h <= x.start_h || x.end_h > f.duration_h) {
            return bad("partition windows must lie within the run".into());
        }
        let c = &f.controller;
        if c.initial_nodes == 0 || c.max_nodes < c.min_nodes || c.interval_ms == 0 || c.half_life_ms == 0 {
            return bad("controller settings out of range".into());
        }
        if !(c.utilization > 0.0 && c.utilization <= 1.0) || c.bucket_width <= 0.0 {
            return bad("utilization must be in (0, 1] and bucket_width positive".into());
        }
        if self.file.service.service_rate <= 0.0 {
            return bad("service_rate must be positive".into());
        }
        Ok(())
    }

    /// Acceptance checks declared by the scenario, if any.
    pub fn evaluate(&self, log: &super::metrics::MetricsLog) -> Option<Vec<super::metrics::Check>> {
        let acc = self.file.acceptance.as_ref()?;
        let spikes = &self.file.workload.spikes;
        let start = spikes.iter().map(|s| s.start_h).reduce(f64::min);
        let end = spikes.iter().map(Spike::end_h).reduce(f64::max);
        Some(super::metrics::evaluate(log, acc, self.spec.availability_sla, start, end))
    }

    pub fn ticks(&self) -> u64 {
        (self.file.duration_h * 3_600_000.0 / self.file.tick_ms as f64).round() as u64
    }
}
