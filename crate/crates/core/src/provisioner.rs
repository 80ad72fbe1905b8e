//! Capacity model, forecasting and scaling decisions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::consistency::Axis;
use crate::storage::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tick: u64,
    pub node: NodeId,
    /// Requests per second served by this node.
    pub request_rate: f64,
    pub latencies_ms: Vec<f64>,
    pub lag_headroom_ms: Option<i64>,
    pub successes: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub bucket_width: f64,
    pub min_observations: usize,
    pub percentile: f64,
    pub bound_ms: f64,
}

impl FitConfig {
    pub fn new(percentile: f64, bound_ms: f64) -> Self {
        FitConfig {
            bucket_width: 10.0,
            min_observations: 50,
            percentile,
            bound_ms,
        }
    }
}

pub const FIT_METHOD: &str = "bucketed-quantile";

#[derive(Debug, Clone, PartialEq)]
pub struct PerfModel {
    /// Highest per-node request rate whose latency percentile met the bound.
    pub capacity: f64,
    pub method: &'static str,
    /// Observations the fit used.
    pub confidence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error("{have} observations, need at least {need}")]
    InsufficientData { have: usize, need: usize },
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Some(s[rank - 1])
}

pub fn fit_model(observations: &[Observation], cfg: &FitConfig) -> Result<PerfModel, ProvisionError> {
    if observations.len() < cfg.min_observations {
        return Err(ProvisionError::InsufficientData {
            have: observations.len(),
            need: cfg.min_observations,
        });
    }
    let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for o in observations {
        let b = (o.request_rate.max(0.0) / cfg.bucket_width).floor() as u64;
        buckets.entry(b).or_default().extend(&o.latencies_ms);
    }
    let ok = buckets
        .iter()
        .filter(|(_, s)| percentile(s, cfg.percentile).is_some_and(|q| q <= cfg.bound_ms))
        .map(|(b, _)| *b)
        .next_back();
    let capacity = match ok {
        Some(b) => (b + 1) as f64 * cfg.bucket_width,
        // every bucket misses: fall back to the lowest observed rate
        None => {
            let lowest = *buckets.keys().next().expect("non-empty");
            (lowest as f64 * cfg.bucket_width).max(cfg.bucket_width / 2.0)
        }
    };
    Ok(PerfModel {
        capacity,
        method: FIT_METHOD,
        confidence: observations.len(),
    })
}

pub const DEFAULT_UTILIZATION: f64 = 0.8;
pub const DEFAULT_MIN_NODES: u32 = 2;

pub fn target_node_count(forecast_rate: f64, model: &PerfModel, utilization: f64, min_nodes: u32) -> u32 {
    let per_node = model.capacity * utilization;
    let need = (forecast_rate.max(0.0) / per_node).ceil();
    (need as u32).max(min_nodes)
}

/// Exponentially weighted moving average of total request rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub half_life_ms: u64,
    pub safety: f64,
    value: Option<f64>,
    last_ms: u64,
}

impl Forecaster {
    pub fn new(half_life_ms: u64, safety: f64) -> Self {
        Forecaster {
            half_life_ms,
            safety,
            value: None,
            last_ms: 0,
        }
    }

    pub fn observe(&mut self, now: u64, rate: f64) {
        self.value = Some(match self.value {
            None => rate,
            Some(v) => {
                let dt = now.saturating_sub(self.last_ms) as f64;
                let alpha = 1.0 - 0.5f64.powf(dt / self.half_life_ms as f64);
                v + alpha * (rate - v)
            }
        });
        self.last_ms = now;
    }

    pub fn average(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn forecast(&self) -> f64 {
        self.average() * self.safety
    }
}

impl Default for Forecaster {
    fn default() -> Self {
        Forecaster::new(10 * 60_000, 1.2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingKind {
    AddNodes(u32),
    RemoveNodes(u32),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingAction {
    pub kind: ScalingKind,
    pub reason: String,
    /// Change in node-hours for each hour the action stays in effect.
    pub cost_delta_node_hours: f64,
}

impl ScalingAction {
    fn none(reason: impl Into<String>) -> Self {
        ScalingAction {
            kind: ScalingKind::None,
            reason: reason.into(),
            cost_delta_node_hours: 0.0,
        }
    }
}

impl fmt::Display for ScalingAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScalingKind::AddNodes(n) => write!(f, "add {n} ({})", self.reason),
            ScalingKind::RemoveNodes(n) => write!(f, "remove {n} ({})", self.reason),
            ScalingKind::None => write!(f, "none ({})", self.reason),
        }
    }
}

pub const DEFAULT_HYSTERESIS_MS: u64 = 30 * 60_000;

/// Scale-up is immediate; scale-down waits until the target has stayed
/// below the current count for a whole hysteresis window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Planner {
    pub hysteresis_ms: u64,
    below_since: Option<u64>,
}

impl Planner {
    pub fn new(hysteresis_ms: u64) -> Self {
        Planner {
            hysteresis_ms,
            below_since: None,
        }
    }

    pub fn plan(&mut self, now: u64, current: u32, target: u32, alarm: bool) -> ScalingAction {
        if target > current {
            self.below_since = None;
            let n = target - current;
            return ScalingAction {
                kind: ScalingKind::AddNodes(n),
                reason: format!("target {target} above {current}"),
                cost_delta_node_hours: n as f64,
            };
        }
        if alarm {
            self.below_since = None;
            return ScalingAction {
                kind: ScalingKind::AddNodes(1),
                reason: "maintenance lag alarm".into(),
                cost_delta_node_hours: 1.0,
            };
        }
        if target == current {
            self.below_since = None;
            return ScalingAction::none("on target");
        }
        let since = *self.below_since.get_or_insert(now);
        if now - since < self.hysteresis_ms {
            return ScalingAction::none(format!("target {target} below {current}, waiting"));
        }
        self.below_since = None;
        let n = current - target;
        ScalingAction {
            kind: ScalingKind::RemoveNodes(n),
            reason: format!("target {target} below {current} for {} min", (now - since) / 60_000),
            cost_delta_node_hours: -(n as f64),
        }
    }
}

impl Default for Planner {
    fn default() -> Self {
        Planner::new(DEFAULT_HYSTERESIS_MS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Disposition {
    Satisfied,
    Sacrificed,
}

/// Pairs of axes that cannot both be met while both are under threat.
pub const CONFLICTS: [(Axis, Axis); 4] = [
    (Axis::Availability, Axis::ReadConsistency),
    (Axis::Latency, Axis::ReadConsistency),
    (Axis::Availability, Axis::Durability),
    (Axis::Latency, Axis::Durability),
];

pub fn conflicts(a: Axis, b: Axis) -> bool {
    CONFLICTS.iter().any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
}

/// Keeps violated axes greedily in priority order, sacrificing any that
/// conflict with one already kept.
pub fn arbitrate(violations: &BTreeSet<Axis>, priority: &[Axis]) -> BTreeMap<Axis, Disposition> {
    let mut out: BTreeMap<Axis, Disposition> = Axis::ALL.iter().map(|&a| (a, Disposition::Satisfied)).collect();
    let mut kept: Vec<Axis> = Vec::new();
    let order = priority
        .iter()
        .copied()
        .chain(Axis::ALL.into_iter().filter(|a| !priority.contains(a)));
    for axis in order.filter(|a| violations.contains(a)) {
        if kept.iter().any(|&k| conflicts(k, axis)) {
            out.insert(axis, Disposition::Sacrificed);
        } else {
            kept.push(axis);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(rate: f64, lat: Vec<f64>) -> Observation {
        Observation {
            tick: 0,
            node: 0,
            request_rate: rate,
            latencies_ms: lat,
            lag_headroom_ms: None,
            successes: 1,
            failures: 0,
        }
    }

    /// Latencies spread evenly so that the 99th sample is 10 + 0.5 rate.
    fn synthetic(rates: impl Iterator<Item = f64>) -> Vec<Observation> {
        rates
            .map(|r| {
                let p99 = 10.0 + 0.5 * r;
                let lat = (1..=100).map(|i| p99 * i as f64 / 99.0).collect();
                obs(r, lat)
            })
            .collect()
    }

    #[test]
    fn fits_linear_latency_law() {
        let data = synthetic((0..300).map(|i| i as f64));
        let m = fit_model(&data, &FitConfig::new(0.99, 100.0)).unwrap();
        assert!((m.capacity - 180.0).abs() <= 10.0, "{}", m.capacity);
        assert_eq!(m.confidence, 300);
    }

    #[test]
    fn all_below_sla_uses_top_bucket() {
        let data = synthetic((0..60).map(|i| i as f64));
        let m = fit_model(&data, &FitConfig::new(0.99, 1000.0)).unwrap();
        assert_eq!(m.capacity, 60.0);
    }

    #[test]
    fn insufficient_data() {
        let data = synthetic((0..10).map(|i| i as f64));
        assert_eq!(
            fit_model(&data, &FitConfig::new(0.99, 100.0)),
            Err(ProvisionError::InsufficientData { have: 10, need: 50 })
        );
    }

    #[test]
    fn node_targets() {
        let m = PerfModel {
            capacity: 180.0,
            method: FIT_METHOD,
            confidence: 100,
        };
        assert_eq!(target_node_count(1000.0, &m, 0.8, 2), 7);
        // exhaustive sweep: smallest n whose utilised capacity covers the rate
        let sweep = (1..).find(|&n| n as f64 * 144.0 >= 1000.0).unwrap();
        assert_eq!(sweep, 7);
        assert_eq!(target_node_count(0.0, &m, 0.8, 2), 2);
    }

    #[test]
    fn planner_examples() {
        let mut p = Planner::default();
        assert_eq!(p.plan(0, 5, 7, false).kind, ScalingKind::AddNodes(2));
        assert_eq!(p.plan(0, 7, 5, false).kind, ScalingKind::None);
        assert_eq!(p.plan(10 * 60_000, 7, 5, false).kind, ScalingKind::None);
        assert_eq!(p.plan(30 * 60_000, 7, 5, false).kind, ScalingKind::RemoveNodes(2));
        assert_eq!(p.plan(31 * 60_000, 5, 5, true).kind, ScalingKind::AddNodes(1));
    }

    #[test]
    fn arbitration_examples() {
        use Axis::*;
        let partition = BTreeSet::from([Availability, ReadConsistency]);
        let d = arbitrate(&partition, &[Availability, ReadConsistency, Latency, Durability]);
        assert_eq!(d[&ReadConsistency], Disposition::Sacrificed);
        assert_eq!(d[&Availability], Disposition::Satisfied);
        let d = arbitrate(&partition, &[ReadConsistency, Availability, Latency, Durability]);
        assert_eq!(d[&Availability], Disposition::Sacrificed);
        let d = arbitrate(&BTreeSet::new(), &Axis::ALL);
        assert!(d.values().all(|&x| x == Disposition::Satisfied));
    }

    fn permutations(items: &[Axis]) -> Vec<Vec<Axis>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let first = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, first);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn arbitration_exhaustive() {
        for mask in 0u8..16 {
            let v: BTreeSet<Axis> = Axis::ALL.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, a)| *a).collect();
            for order in permutations(&Axis::ALL) {
                let d = arbitrate(&v, &order);
                assert_eq!(d, arbitrate(&v, &order));
                let kept: Vec<Axis> = v.iter().copied().filter(|a| d[a] == Disposition::Satisfied).collect();
                for a in Axis::ALL.iter().filter(|a| !v.contains(a)) {
                    assert_eq!(d[a], Disposition::Satisfied);
                }
                if let Some(top) = order.iter().find(|a| v.contains(a)) {
                    assert_eq!(d[top], Disposition::Satisfied);
                }
                for a in &kept {
                    for b in &kept {
                        assert!(!conflicts(*a, *b));
                    }
                }
                // every sacrificed axis lost to a higher-priority kept axis
                for a in v.iter().filter(|a| d[a] == Disposition::Sacrificed) {
                    let pa = order.iter().position(|x| x == a).unwrap();
                    assert!(kept.iter().any(|k| conflicts(*k, *a) && order.iter().position(|x| x == k).unwrap() < pa));
                }
            }
        }
    }

    #[test]
    fn forecaster_half_life() {
        let mut f = Forecaster::new(600_000, 1.2);
        f.observe(0, 0.0);
        f.observe(600_000, 100.0);
        assert!((f.average() - 50.0).abs() < 1e-9);
        assert!((f.forecast() - 60.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn inflation_never_raises_capacity(seed in proptest::collection::vec((0.0f64..400.0, 1.0f64..200.0), 50..200), bump in 0.1f64..100.0) {
            let data: Vec<Observation> = seed.iter().map(|&(r, l)| obs(r, vec![l, l * 0.5])).collect();
            let inflated: Vec<Observation> = data.iter().map(|o| obs(o.request_rate, o.latencies_ms.iter().map(|l| l + bump).collect())).collect();
            let cfg = FitConfig::new(0.99, 100.0);
            prop_assert!(fit_model(&inflated, &cfg).unwrap().capacity <= fit_model(&data, &cfg).unwrap().capacity);
        }

        #[test]
        fn target_monotone(rate in 0.0f64..1e6, cap in 1.0f64..1000.0) {
            let m = PerfModel { capacity: cap, method: FIT_METHOD, confidence: 50 };
            prop_assert!(target_node_count(rate * 2.0, &m, 0.8, 2) >= target_node_count(rate, &m, 0.8, 2));
        }

        #[test]
        fn no_remove_under_alarm(steps in proptest::collection::vec((1u32..20, 1u32..20, any::<bool>()), 1..50)) {
            let mut p = Planner::default();
            for (i, (cur, tgt, alarm)) in steps.into_iter().enumerate() {
                let a = p.plan(i as u64 * 600_000, cur, tgt, alarm);
                if alarm {
                    prop_assert!(!matches!(a.kind, ScalingKind::RemoveNodes(_)));
                }
            }
        }
    }
}
