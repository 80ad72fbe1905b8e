use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::Acceptance;

/// One row per tick. Latency columns are per-node model quantiles; the
/// `latency_sla_ms` column is at the spec's SLA percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tick: u64,
    pub time_ms: u64,
    pub active_users: f64,
    pub request_rate: f64,
    pub nodes: u32,
    pub serving_nodes: u32,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub latency_sla_ms: f64,
    pub success_fraction: f64,
    pub reads: u64,
    pub writes: u64,
    pub stale_reads: u64,
    pub unflagged_stale: u64,
    pub stalled_reads: u64,
    pub failed_reads: u64,
    pub failed_writes: u64,
    pub staleness_p50_ms: u64,
    pub staleness_max_ms: u64,
    pub queue_depth: u64,
    pub min_headroom_ms: Option<i64>,
    pub tasks_applied: u64,
    pub deadline_misses: u64,
    pub node_hours: f64,
    pub user_hours: f64,
    pub cost_per_user: f64,
    pub arbitration_events: u64,
    pub dispositions: String,
    pub data_loss_events: u64,
    pub bytes_moved: u64,
    pub action: String,
}

pub const HEADER: [&str; 31] = [
    "tick",
    "time_ms",
    "active_users",
    "request_rate",
    "nodes",
    "serving_nodes",
    "latency_p50_ms",
    "latency_p99_ms",
    "latency_sla_ms",
    "success_fraction",
    "reads",
    "writes",
    "stale_reads",
    "unflagged_stale",
    "stalled_reads",
    "failed_reads",
    "failed_writes",
    "staleness_p50_ms",
    "staleness_max_ms",
    "queue_depth",
    "min_headroom_ms",
    "tasks_applied",
    "deadline_misses",
    "node_hours",
    "user_hours",
    "cost_per_user",
    "arbitration_events",
    "dispositions",
    "data_loss_events",
    "bytes_moved",
    "action",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics header does not match: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog, MetricsError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| MetricsError::SchemaMismatch(e.to_string()))?.clone();
        if header.iter().ne(HEADER.iter().copied()) {
            let got: Vec<&str> = header.iter().collect();
            return Err(MetricsError::SchemaMismatch(got.join(",")));
        }
        let rows = r
            .deserialize()
            .collect::<Result<Vec<MetricsRow>, _>>()
            .map_err(|e| MetricsError::SchemaMismatch(e.to_string()))?;
        Ok(MetricsLog { rows })
    }

    pub fn summary(&self) -> Summary {
        let rows = &self.rows;
        let total_rate: f64 = rows.iter().map(|r| r.request_rate).sum();
        let success = if total_rate > 0.0 {
            rows.iter().map(|r| r.success_fraction * r.request_rate).sum::<f64>() / total_rate
        } else {
            1.0
        };
        let last = rows.last();
        let half = &rows[rows.len() / 2..];
        let node_h: f64 = half.iter().map(|r| r.nodes as f64).sum();
        let user_h: f64 = half.iter().map(|r| r.active_users).sum();
        Summary {
            ticks: rows.len() as u64,
            max_latency_sla_ms: rows.iter().map(|r| r.latency_sla_ms).fold(0.0, f64::max),
            success_fraction: success,
            stale_reads: rows.iter().map(|r| r.stale_reads).sum(),
            staleness_violations: rows.iter().map(|r| r.unflagged_stale).sum(),
            failed_reads: rows.iter().map(|r| r.failed_reads).sum(),
            deadline_misses: rows.iter().map(|r| r.deadline_misses).sum(),
            node_hours: last.map_or(0.0, |r| r.node_hours),
            user_hours: last.map_or(0.0, |r| r.user_hours),
            cost_per_user: last.map_or(0.0, |r| r.cost_per_user),
            converged_cost_per_user: if user_h > 0.0 { node_h / user_h } else { 0.0 },
            peak_nodes: rows.iter().map(|r| r.nodes).max().unwrap_or(0),
            final_nodes: last.map_or(0, |r| r.nodes),
            data_loss_events: rows.iter().map(|r| r.data_loss_events).sum(),
        }
    }

    /// Request-weighted success over ticks whose time lies in `[from_h, to_h)`.
    pub fn success_between(&self, from_h: f64, to_h: f64) -> Option<f64> {
        let in_window = |r: &&MetricsRow| {
            let h = r.time_ms as f64 / 3_600_000.0;
            from_h <= h && h < to_h
        };
        let rate: f64 = self.rows.iter().filter(in_window).map(|r| r.request_rate).sum();
        (rate > 0.0).then(|| {
            self.rows
                .iter()
                .filter(in_window)
                .map(|r| r.success_fraction * r.request_rate)
                .sum::<f64>()
                / rate
        })
    }

    /// Node count at the last tick before `h` hours.
    pub fn nodes_at(&self, h: f64) -> Option<u32> {
        self.rows
            .iter()
            .take_while(|r| (r.time_ms as f64) < h * 3_600_000.0)
            .last()
            .map(|r| r.nodes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub ticks: u64,
    pub max_latency_sla_ms: f64,
    pub success_fraction: f64,
    pub stale_reads: u64,
    /// Data reads past the bound that were not flagged stale.
    pub staleness_violations: u64,
    pub failed_reads: u64,
    pub deadline_misses: u64,
    pub node_hours: f64,
    pub user_hours: f64,
    pub cost_per_user: f64,
    /// Node-hours per active-user-hour over the second half of the run.
    pub converged_cost_per_user: f64,
    pub peak_nodes: u32,
    pub final_nodes: u32,
    pub data_loss_events: u64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ticks                  {}", self.ticks)?;
        writeln!(f, "max SLA-latency (ms)   {:.2}", self.max_latency_sla_ms)?;
        writeln!(f, "success fraction       {:.6}", self.success_fraction)?;
        writeln!(f, "stale reads (flagged)  {}", self.stale_reads)?;
        writeln!(f, "staleness violations   {}", self.staleness_violations)?;
        writeln!(f, "failed reads           {}", self.failed_reads)?;
        writeln!(f, "deadline misses        {}", self.deadline_misses)?;
        writeln!(f, "node-hours             {:.2}", self.node_hours)?;
        writeln!(f, "user-hours             {:.2}", self.user_hours)?;
        writeln!(f, "cost per user          {:.6}", self.cost_per_user)?;
        writeln!(f, "converged cost/user    {:.6}", self.converged_cost_per_user)?;
        writeln!(f, "peak nodes             {}", self.peak_nodes)?;
        writeln!(f, "final nodes            {}", self.final_nodes)?;
        writeln!(f, "data-loss events       {}", self.data_loss_events)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Evaluates declared thresholds. `spike_end_h` is the end of the last
/// spike, `availability` the spec's target used when no minimum is given.
pub fn evaluate(
    log: &MetricsLog,
    acc: &Acceptance,
    availability: f64,
    spike_start_h: Option<f64>,
    spike_end_h: Option<f64>,
) -> Vec<Check> {
    let mut out = Vec::new();
    let s = log.summary();
    let from = acc.success_from_h.unwrap_or(0.0);
    let to = acc.success_to_h.unwrap_or(f64::INFINITY);
    let min = acc.min_success.unwrap_or(availability);
    let got = log.success_between(from, to).unwrap_or(1.0);
    out.push(Check {
        name: "success".into(),
        passed: got >= min,
        detail: format!("{got:.6} over [{from}, {to}) h, need >= {min}"),
    });
    if let Some(max) = acc.max_deadline_misses {
        out.push(Check {
            name: "deadline_misses".into(),
            passed: s.deadline_misses <= max,
            detail: format!("{} <= {max}", s.deadline_misses),
        });
    }
    if let Some(max) = acc.max_unflagged_stale {
        out.push(Check {
            name: "staleness".into(),
            passed: s.staleness_violations <= max,
            detail: format!("{} unflagged stale reads <= {max}", s.staleness_violations),
        });
    }
    if let Some(max) = acc.max_nodes {
        out.push(Check {
            name: "max_nodes".into(),
            passed: s.peak_nodes <= max,
            detail: format!("peak {} <= {max}", s.peak_nodes),
        });
    }
    if let Some(c) = &acc.nodes_after_spike {
        let (passed, detail) = match (spike_start_h, spike_end_h) {
            (Some(start), Some(end)) => {
                let base = log.nodes_at(start).unwrap_or(0);
                let after = log.nodes_at(end + c.settle_h).unwrap_or(u32::MAX);
                (
                    after as f64 <= c.max_ratio * base as f64,
                    format!("{after} nodes {} h after spike, baseline {base}", c.settle_h),
                )
            }
            _ => (false, "scenario has no spike".into()),
        };
        out.push(Check {
            name: "nodes_after_spike".into(),
            passed,
            detail,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tick: u64) -> MetricsRow {
        MetricsRow {
            tick,
            time_ms: tick * 60_000,
            active_users: 10.0,
            request_rate: 10.0,
            nodes: 3,
            serving_nodes: 3,
            latency_p50_ms: 5.1,
            latency_p99_ms: 6.0,
            latency_sla_ms: 7.0,
            success_fraction: 1.0,
            reads: 9,
            writes: 1,
            stale_reads: 0,
            unflagged_stale: 0,
            stalled_reads: 0,
            failed_reads: 0,
            failed_writes: 0,
            staleness_p50_ms: 0,
            staleness_max_ms: 0,
            queue_depth: 0,
            min_headroom_ms: None,
            tasks_applied: 1,
            deadline_misses: 0,
            node_hours: 0.05 * (tick + 1) as f64,
            user_hours: 0.16 * (tick + 1) as f64,
            cost_per_user: 0.3125,
            arbitration_events: 0,
            dispositions: String::new(),
            data_loss_events: 0,
            bytes_moved: 0,
            action: "add:1".into(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut r = row(1);
        r.min_headroom_ms = Some(-5);
        let log = MetricsLog { rows: vec![row(0), r] };
        let text = log.to_csv();
        assert!(text.starts_with(&HEADER.join(",")));
        assert_eq!(MetricsLog::from_csv(&text).unwrap(), log);
    }

    #[test]
    fn header_only_is_empty() {
        let log = MetricsLog::from_csv(&format!("{}\n", HEADER.join(","))).unwrap();
        assert!(log.rows.is_empty());
    }

    #[test]
    fn corrupted_header_rejected() {
        let text = MetricsLog { rows: vec![row(0)] }.to_csv().replacen("tick", "tock", 1);
        assert!(matches!(MetricsLog::from_csv(&text), Err(MetricsError::SchemaMismatch(_))));
    }
}
