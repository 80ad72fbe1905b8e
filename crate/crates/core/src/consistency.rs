//! Declarative consistency and performance specifications.
//!
//! A spec is a JSON document, one per namespace:
//!
//! ```json
//! {
//!   "namespace": "social",
//!   "latency_sla": { "percentile": 0.999, "bound_ms": 100 },
//!   "availability": 0.9999,
//!   "write_policy": { "kind": "merge", "merge_fn": "set-union" },
//!   "staleness_bound_ms": "ten minutes",
//!   "session": ["read_your_writes", "monotonic_reads"],
//!   "durability": 0.99999,
//!   "priority": ["availability", "read_consistency", "latency", "durability"]
//! }
//! ```
//!
//! `write_policy.kind` is one of `serializable`, `merge` or `last_write_wins`.
//! `staleness_bound_ms` is either an integer number of milliseconds or a
//! duration phrase such as `"10 minutes"`, `"ten minutes"`, `"90s"`.
//! Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::merge::MergeRegistry;

/// The prioritizable requirement axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Availability,
    Latency,
    ReadConsistency,
    Durability,
}

impl Axis {
    pub const ALL: [Axis; 4] = [
        Axis::Availability,
        Axis::Latency,
        Axis::ReadConsistency,
        Axis::Durability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Availability => "availability",
            Axis::Latency => "latency",
            Axis::ReadConsistency => "read_consistency",
            Axis::Durability => "durability",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySla {
    pub percentile: f64,
    pub bound_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WritePolicy {
    Serializable,
    Merge(String),
    LastWriteWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SessionGuarantee {
    ReadYourWrites,
    MonotonicReads,
}

impl SessionGuarantee {
    pub fn name(self) -> &'static str {
        match self {
            SessionGuarantee::ReadYourWrites => "read_your_writes",
            SessionGuarantee::MonotonicReads => "monotonic_reads",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "read_your_writes" => Some(SessionGuarantee::ReadYourWrites),
            "monotonic_reads" => Some(SessionGuarantee::MonotonicReads),
            _ => None,
        }
    }
}

/// Validated per-namespace specification. Immutable once parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySpec {
    pub namespace: String,
    pub latency_sla: LatencySla,
    pub availability_sla: f64,
    pub write_policy: WritePolicy,
    pub staleness_bound_ms: u64,
    pub session_guarantees: BTreeSet<SessionGuarantee>,
    pub durability_target: f64,
    pub priority_order: Vec<Axis>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid spec: {0}")]
    Validation(String),
    #[error("unknown merge function `{0}`")]
    UnknownMergeFunction(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    namespace: String,
    latency_sla: RawLatency,
    availability: f64,
    write_policy: RawWritePolicy,
    staleness_bound_ms: serde_json::Value,
    #[serde(default)]
    session: Vec<String>,
    durability: f64,
    priority: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLatency {
    percentile: f64,
    bound_ms: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWritePolicy {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merge_fn: Option<String>,
}

fn invalid(msg: impl Into<String>) -> SpecError {
    SpecError::Validation(msg.into())
}

/// Parses and validates a spec document.
pub fn parse_spec(text: &str, merges: &MergeRegistry) -> Result<ConsistencySpec, SpecError> {
    let raw: RawSpec = serde_json::from_str(text).map_err(|e| SpecError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let staleness_bound_ms = match &raw.staleness_bound_ms {
        serde_json::Value::Number(n) => n
            .as_u64()
            .ok_or_else(|| invalid("staleness_bound_ms must be a positive integer"))?,
        serde_json::Value::String(s) => parse_duration_ms(s)
            .ok_or_else(|| invalid(format!("unrecognised duration `{s}`")))?,
        _ => return Err(invalid("staleness_bound_ms must be an integer or duration string")),
    };

    let write_policy = match (raw.write_policy.kind.as_str(), raw.write_policy.merge_fn) {
        ("serializable", None) => WritePolicy::Serializable,
        ("last_write_wins", None) => WritePolicy::LastWriteWins,
        ("merge", Some(f)) => WritePolicy::Merge(f),
        ("merge", None) => return Err(invalid("merge policy requires merge_fn")),
        (k @ ("serializable" | "last_write_wins"), Some(_)) => {
            return Err(invalid(format!("merge_fn is only valid with kind merge, not {k}")))
        }
        (k, _) => return Err(invalid(format!("unknown write policy kind `{k}`"))),
    };

    let mut session_guarantees = BTreeSet::new();
    for s in &raw.session {
        let g = SessionGuarantee::parse(s)
            .ok_or_else(|| invalid(format!("unknown session guarantee `{s}`")))?;
        if !session_guarantees.insert(g) {
            return Err(invalid(format!("duplicate session guarantee `{s}`")));
        }
    }

    let mut priority_order = Vec::with_capacity(raw.priority.len());
    for p in &raw.priority {
        priority_order.push(Axis::parse(p).ok_or_else(|| invalid(format!("unknown axis `{p}`")))?);
    }

    let spec = ConsistencySpec {
        namespace: raw.namespace,
        latency_sla: LatencySla {
            percentile: raw.latency_sla.percentile,
            bound_ms: raw.latency_sla.bound_ms,
        },
        availability_sla: raw.availability,
        write_policy,
        staleness_bound_ms,
        session_guarantees,
        durability_target: raw.durability,
        priority_order,
    };
    spec.validate(merges)?;
    Ok(spec)
}

fn open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl ConsistencySpec {
    pub fn validate(&self, merges: &MergeRegistry) -> Result<(), SpecError> {
        let ns = &self.namespace;
        let ident = !ns.is_empty()
            && ns.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && ns.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !ident {
            return Err(invalid(format!("namespace `{ns}` is not an identifier")));
        }
        if !open_unit(self.latency_sla.percentile) {
            return Err(invalid("latency_sla.percentile must lie in (0,1)"));
        }
        if self.latency_sla.bound_ms == 0 {
            return Err(invalid("latency_sla.bound_ms must be positive"));
        }
        if !open_unit(self.availability_sla) {
            return Err(invalid("availability must lie in (0,1)"));
        }
        if self.staleness_bound_ms == 0 {
            return Err(invalid("staleness_bound_ms must be positive"));
        }
        if !open_unit(self.durability_target) {
            return Err(invalid("durability must lie in (0,1)"));
        }
        let distinct: BTreeSet<Axis> = self.priority_order.iter().copied().collect();
        if self.priority_order.len() != Axis::ALL.len() || distinct.len() != Axis::ALL.len() {
            return Err(invalid(
                "priority must list each of availability, latency, read_consistency, durability exactly once",
            ));
        }
        if let WritePolicy::Merge(f) = &self.write_policy {
            if !merges.contains(f) {
                return Err(SpecError::UnknownMergeFunction(f.clone()));
            }
        }
        Ok(())
    }

    /// Position of `axis` in the priority order; 0 is most important.
    pub fn rank(&self, axis: Axis) -> usize {
        self.priority_order
            .iter()
            .position(|a| *a == axis)
            .unwrap_or(usize::MAX)
    }

    pub fn outranks(&self, a: Axis, b: Axis) -> bool {
        self.rank(a) < self.rank(b)
    }

    pub fn requires(&self, g: SessionGuarantee) -> bool {
        self.session_guarantees.contains(&g)
    }

    /// Serializes back to the document format (durations as integers).
    pub fn to_json(&self) -> String {
        let (kind, merge_fn) = match &self.write_policy {
            WritePolicy::Serializable => ("serializable", None),
            WritePolicy::LastWriteWins => ("last_write_wins", None),
            WritePolicy::Merge(f) => ("merge", Some(f.clone())),
        };
        let raw = RawSpec {
            namespace: self.namespace.clone(),
            latency_sla: RawLatency {
                percentile: self.latency_sla.percentile,
                bound_ms: self.latency_sla.bound_ms,
            },
            availability: self.availability_sla,
            write_policy: RawWritePolicy {
                kind: kind.to_string(),
                merge_fn,
            },
            staleness_bound_ms: self.staleness_bound_ms.into(),
            session: self
                .session_guarantees
                .iter()
                .map(|g| g.name().to_string())
                .collect(),
            durability: self.durability_target,
            priority: self.priority_order.iter().map(|a| a.name().to_string()).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("spec serializes")
    }
}

const NUMBER_WORDS: [(&str, u64); 20] = [
    ("one", 1),
    ("two", 2),
    ("three", 3),
    ("four", 4),
    ("five", 5),
    ("six", 6),
    ("seven", 7),
    ("eight", 8),
    ("nine", 9),
    ("ten", 10),
    ("eleven", 11),
    ("twelve", 12),
    ("fifteen", 15),
    ("twenty", 20),
    ("thirty", 30),
    ("forty", 40),
    ("forty-five", 45),
    ("fifty", 50),
    ("sixty", 60),
    ("ninety", 90),
];

/// Parses `"10 minutes"`, `"ten minutes"`, `"600s"`, `"1.5h"`, `"250 ms"`.
pub fn parse_duration_ms(s: &str) -> Option<u64> {
    let s = s.trim().to_ascii_lowercase();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, unit) = if split > 0 {
        let n: f64 = s[..split].parse().ok()?;
        (n, s[split..].trim())
    } else {
        let (word, rest) = s.split_once(char::is_whitespace)?;
        let n = if word == "a" || word == "an" {
            1
        } else {
            NUMBER_WORDS.iter().find(|(w, _)| *w == word)?.1
        };
        (n as f64, rest.trim())
    };
    let scale = match unit {
        "ms" | "millisecond" | "milliseconds" => 1.0,
        "s" | "sec" | "secs" | "second" | "seconds" => 1_000.0,
        "m" | "min" | "mins" | "minute" | "minutes" => 60_000.0,
        "h" | "hr" | "hrs" | "hour" | "hours" => 3_600_000.0,
        "d" | "day" | "days" => 86_400_000.0,
        _ => return None,
    };
    let ms = num * scale;
    (ms.is_finite() && ms >= 1.0 && ms.fract() == 0.0).then_some(ms as u64)
}

/// Smallest replica count `R >= 1` with `node_failure_prob^R <= 1 - durability_target`,
/// assuming independent node failures within an epoch.
pub fn replicas_for(durability_target: f64, node_failure_prob: f64) -> u32 {
    assert!(open_unit(durability_target), "durability target must lie in (0,1)");
    assert!(open_unit(node_failure_prob), "failure probability must lie in (0,1)");
    let allowed_loss = 1.0 - durability_target;
    let mut r = 1u32;
    while node_failure_prob.powi(r as i32) > allowed_loss {
        r += 1;
    }
    r
}
