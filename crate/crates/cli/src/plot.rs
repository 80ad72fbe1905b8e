//! Plain-text time-series charts.

use std::fmt::Write;

use scalestore::sim::{MetricsLog, MetricsRow};

const HEIGHT: usize = 10;

type Series = (&'static str, &'static str, fn(&MetricsRow) -> f64);

/// One chart per tracked series, keyed by file stem.
pub fn all(log: &MetricsLog, width: usize) -> Vec<(&'static str, String)> {
    let series: [Series; 5] = [
        ("latency", "latency at SLA percentile (ms)", |r| r.latency_sla_ms),
        ("staleness", "max read staleness (ms)", |r| r.staleness_max_ms as f64),
        ("nodes", "node count", |r| r.nodes as f64),
        ("cost_per_user", "node-hours per user-hour", |r| r.cost_per_user),
        ("queue_depth", "maintenance queue depth", |r| r.queue_depth as f64),
    ];
    series
        .iter()
        .map(|(name, title, f)| {
            let values: Vec<f64> = log.rows.iter().map(f).collect();
            let hours = log.rows.last().map_or(0.0, |r| r.time_ms as f64 / 3_600_000.0);
            (*name, chart(title, &values, width, hours))
        })
        .collect()
}

/// Downsamples to `width` columns (bucket maximum) and draws `HEIGHT` rows.
pub fn chart(title: &str, values: &[f64], width: usize, hours: f64) -> String {
    let mut out = format!("{title}\n");
    if values.is_empty() {
        out.push_str("(no data)\n");
        return out;
    }
    let cols = width.min(values.len());
    let col: Vec<f64> = (0..cols)
        .map(|c| {
            let lo = c * values.len() / cols;
            let hi = ((c + 1) * values.len() / cols).max(lo + 1);
            values[lo..hi].iter().copied().fold(f64::MIN, f64::max)
        })
        .collect();
    let top = col.iter().copied().fold(0.0, f64::max);
    for row in (0..HEIGHT).rev() {
        let level = top * row as f64 / HEIGHT as f64;
        let label = if row == HEIGHT - 1 { format!("{top:>10.2}") } else if row == 0 { format!("{:>10}", 0) } else { " ".repeat(10) };
        let line: String = col.iter().map(|&v| if v > level && top > 0.0 { '#' } else { ' ' }).collect();
        let _ = writeln!(out, "{label} |{}", line.trim_end());
    }
    let _ = writeln!(out, "{} +{}", " ".repeat(10), "-".repeat(cols));
    let _ = writeln!(out, "{} 0 h{:>w$}", " ".repeat(10), format!("{hours:.1} h"), w = cols.saturating_sub(3));
    out
}
