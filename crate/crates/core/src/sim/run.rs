use std::collections::{BTreeSet, VecDeque};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use thiserror::Error;

use super::cluster::{rebalance, Cluster};
use super::faults::{far_side, inject_faults, FaultEvent};
use super::metrics::{MetricsLog, MetricsRow};
use super::scenario::{Scenario, ScenarioError};
use crate::consistency::{replicas_for, Axis};
use crate::pipeline::{Database, PipelineError, ReadOutcome, SessionToken, TickTrace};
use crate::provisioner::{
    arbitrate, fit_model, target_node_count, Disposition, FitConfig, Forecaster, Observation, PerfModel, Planner,
    ScalingKind,
};
use crate::query::{bind, Cardinality, RangeQuery, Schema};
use crate::storage::{FieldKind, MergeRegistry, NodeId, StorageError, Value};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("internal invariant violated: {0}")]
    Invariant(#[from] PipelineError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub trace: Vec<TickTrace>,
}

const WORKLOAD_STREAM: u64 = 1;
const FAULT_STREAM: u64 = 2;
const OBSERVE_STREAM: u64 = 3;
const CALIBRATE_STREAM: u64 = 4;
const DATA_STREAM: u64 = 5;

/// Independent generator per subsystem, all derived from the scenario seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(scenario)?;
    for tick in 0..scenario.ticks() {
        sim.step(tick)?;
    }
    Ok(sim.out)
}

#[derive(Debug, Clone)]
enum OpKind {
    Read(String),
    Write(String),
}

#[derive(Debug)]
struct PendingRead {
    user: u32,
    query: RangeQuery,
    started: u64,
}

/// Whether string values of `field` identify entities (keys and join fields).
fn is_entity_field(schema: &Schema, table: &str, field: &str) -> bool {
    let t = schema.table(table).expect("known table");
    let idx = t.field_index(field).expect("known field");
    t.is_pk_field(idx)
        || schema.relationships.iter().any(|r| {
            (r.from_table == table && r.from_field == field) || (r.to_table == table && r.to_field == field)
        })
}

fn random_value(kind: FieldKind, entity: bool, users: u32, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        FieldKind::String if entity => Value::str(format!("u{}", rng.gen_range(0..users))),
        FieldKind::String => Value::str(format!("n{}", rng.gen_range(0..50))),
        FieldKind::Int => Value::Int(rng.gen_range(0..1000)),
        FieldKind::Date => Value::Date(rng.gen_range(-7300..12000)),
    }
}

/// A random row owned by `user`, or `None` if inserting it would break a
/// declared cardinality bound.
fn random_row(db: &Database, table: &str, user: u32, users: u32, rng: &mut ChaCha8Rng) -> Option<Vec<Value>> {
    let t = db.schema.table(table).expect("known table");
    let owner = t.primary_key[0];
    let row: Vec<Value> = t
        .fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i == owner && f.kind == FieldKind::String {
                Value::str(format!("u{user}"))
            } else {
                random_value(f.kind, is_entity_field(&db.schema, table, &f.name), users, rng)
            }
        })
        .collect();
    let rows = db.rows(table).expect("row table");
    let pk = rows.pk_of(&row);
    for rel in &db.schema.relationships {
        let Cardinality::Bounded(k) = rel.bound else { continue };
        for (side_table, side_field) in [(&rel.from_table, &rel.from_field), (&rel.to_table, &rel.to_field)] {
            if side_table != table {
                continue;
            }
            let f = t.field_index(side_field).expect("declared field");
            let others = rows.lookup(f, &row[f]).filter(|(p, _)| **p != pk).count() as u64;
            if others >= k {
                return None;
            }
        }
    }
    Some(row)
}

struct Simulation<'a> {
    s: &'a Scenario,
    db: Database,
    cluster: Cluster,
    sessions: Vec<SessionToken>,
    replicas: u32,
    min_nodes: u32,
    forecaster: Forecaster,
    planner: Planner,
    fit: FitConfig,
    calibration: Vec<Observation>,
    window: VecDeque<Observation>,
    model: Option<PerfModel>,
    ops: Vec<OpKind>,
    op_weights: Option<WeightedIndex<f64>>,
    rng_w: ChaCha8Rng,
    rng_f: ChaCha8Rng,
    rng_o: ChaCha8Rng,
    retry: Vec<PendingRead>,
    node_hours: f64,
    user_hours: f64,
    out: RunOutput,
}

impl<'a> Simulation<'a> {
    fn new(s: &'a Scenario) -> Result<Self, SimError> {
        let f = &s.file;
        let c = &f.controller;
        let replicas = replicas_for(s.spec.durability_target, c.node_failure_prob).max(1);
        let min_nodes = c.min_nodes.max(replicas).min(c.max_nodes);
        let cluster = Cluster::new(c.initial_nodes.max(min_nodes));
        let first: Vec<NodeId> = cluster.all().into_iter().take(replicas as usize).collect();
        let mut db = Database::new(
            s.schema.clone(),
            s.catalog.clone(),
            s.spec.clone(),
            MergeRegistry::with_builtins(),
            &first,
        );
        db.config.headroom_fraction = c.headroom_fraction;
        db.config.retry_ms = f.tick_ms;
        let w = &f.workload;
        let mut ops = Vec::new();
        let mut weights = Vec::new();
        for (name, &wt) in &w.reads {
            ops.push(OpKind::Read(name.clone()));
            weights.push(wt);
        }
        for (name, &wt) in &w.writes {
            ops.push(OpKind::Write(name.clone()));
            weights.push(wt);
        }
        let op_weights = WeightedIndex::new(&weights).ok();
        let fit = FitConfig {
            bucket_width: c.bucket_width,
            min_observations: c.min_observations,
            percentile: s.spec.latency_sla.percentile,
            bound_ms: s.spec.latency_sla.bound_ms as f64,
        };
        let mut sim = Simulation {
            s,
            db,
            cluster,
            sessions: vec![SessionToken::new(); w.data_users as usize],
            replicas,
            min_nodes,
            forecaster: Forecaster::new(c.half_life_ms, c.safety),
            planner: Planner::new(c.hysteresis_ms),
            fit,
            calibration: Vec::new(),
            window: VecDeque::new(),
            model: None,
            ops,
            op_weights,
            rng_w: stream(f.seed, WORKLOAD_STREAM),
            rng_f: stream(f.seed, FAULT_STREAM),
            rng_o: stream(f.seed, OBSERVE_STREAM),
            retry: Vec::new(),
            node_hours: 0.0,
            user_hours: 0.0,
            out: RunOutput::default(),
        };
        sim.calibrate();
        sim.preload()?;
        Ok(sim)
    }

    /// Latency samples from a single node held at a given request rate.
    fn sample_latencies(&self, rng: &mut ChaCha8Rng, lambda: f64, n: usize) -> Vec<f64> {
        let m = &self.s.file.service;
        let slack = m.service_rate - lambda;
        let saturated = 10.0 * self.fit.bound_ms;
        if slack <= 0.0 {
            return vec![saturated; n];
        }
        let exp = Exp::new(slack).expect("positive rate");
        (0..n).map(|_| m.fixed_ms + exp.sample(rng) * 1000.0).collect()
    }

    /// Load-test sweep of one node from idle to past saturation.
    fn calibrate(&mut self) {
        let mut rng = stream(self.s.file.seed, CALIBRATE_STREAM);
        let c = &self.s.file.controller;
        let step = self.fit.bucket_width / 2.0;
        let top = self.s.file.service.service_rate * 1.5;
        let per = c.calibration_samples / 4;
        let mut rate = 0.0;
        while rate <= top {
            let lat = self.sample_latencies(&mut rng, rate, per.max(1));
            self.calibration.push(Observation {
                tick: 0,
                node: NodeId::MAX,
                request_rate: rate,
                latencies_ms: lat,
                lag_headroom_ms: None,
                successes: 0,
                failures: 0,
            });
            rate += step;
        }
    }

    /// Seeds every table with rows for each data-layer user.
    fn preload(&mut self) -> Result<(), SimError> {
        let mut rng = stream(self.s.file.seed, DATA_STREAM);
        let users = self.s.file.workload.data_users;
        let degree = self.s.file.workload.initial_degree;
        let all = |_: NodeId| true;
        let mut session = SessionToken::new();
        let tables: Vec<(String, usize)> = self
            .db
            .schema
            .tables
            .iter()
            .map(|t| (t.name.clone(), t.primary_key.len()))
            .collect();
        for u in 0..users {
            for (t, pk_len) in &tables {
                let attempts = if *pk_len == 1 { 1 } else { degree };
                for _ in 0..attempts {
                    if let Some(row) = random_row(&self.db, t, u, users, &mut rng) {
                        self.db.write(t, row, &mut session, 0, &all)?;
                    }
                }
            }
        }
        self.db.drain_all(0, &all)?;
        Ok(())
    }

    fn random_params(&mut self, template: &str, user: u32) -> std::collections::BTreeMap<String, Value> {
        let ci = self.db.catalog.template(template).expect("validated template");
        let users = self.s.file.workload.data_users;
        let mut out = std::collections::BTreeMap::new();
        for (i, p) in ci.template.params.iter().enumerate() {
            let f = p.predicates[0];
            let table = &ci.template.chain[f.pos].table;
            let field = &self.db.schema.table(table).expect("table").fields[f.field].name;
            let entity = is_entity_field(&self.db.schema, table, field);
            let v = if i == 0 && entity && p.kind == FieldKind::String {
                Value::str(format!("u{user}"))
            } else {
                random_value(p.kind, entity, users, &mut self.rng_w)
            };
            out.insert(p.name.clone(), v);
        }
        out
    }

    fn step(&mut self, tick: u64) -> Result<(), SimError> {
        let f = &self.s.file;
        let tick_ms = f.tick_ms;
        let now = tick * tick_ms;
        let tick_h = tick_ms as f64 / 3_600_000.0;
        let spec = &self.s.spec;
        let bound = spec.latency_sla.bound_ms as f64;
        let mut data_loss = 0u64;
        let mut bytes_moved = 0u64;

        // faults
        let events = inject_faults(&f.faults, tick, tick_ms, &self.cluster.all(), &mut self.rng_f);
        let failed: BTreeSet<NodeId> = events
            .iter()
            .filter_map(|e| match e {
                FaultEvent::NodeFailed(n) => Some(*n),
                _ => None,
            })
            .collect();
        if !failed.is_empty() {
            for store in self.db.stores() {
                data_loss += store
                    .partitions()
                    .iter()
                    .filter(|p| !p.replicas.is_empty() && p.nodes().all(|n| failed.contains(&n)))
                    .count() as u64;
            }
            for n in &failed {
                self.cluster.fail(*n);
            }
            log::info!("tick {tick}: {} node(s) failed", failed.len());
        }
        let partitioned = f.faults.partitioned(now);
        if !partitioned {
            for s in self.db.stores_mut() {
                s.sync(&|_| true);
            }
        }
        bytes_moved += rebalance(&mut self.db, &self.cluster, now, self.replicas, f.controller.split_rows);

        // load model
        let w = &f.workload;
        let users = w.active_users(now);
        let rate = w.request_rate(now);
        let serving = self.cluster.ready(now);
        let model = &f.service;
        let lambda = if serving.is_empty() { f64::INFINITY } else { rate / serving.len() as f64 };
        let saturated = 10.0 * bound;
        let q = |p: f64| model.latency_quantile_ms(lambda, p).unwrap_or(saturated);
        let (p50, p99, psla) = (q(0.5), q(0.99), q(spec.latency_sla.percentile));
        let load_success = if serving.is_empty() { 0.0 } else { model.success_within(lambda, bound) };

        // data layer
        let ops_target = (rate * tick_ms as f64 / 1000.0).round() as u64;
        let n_ops = ops_target.min(w.sample_ops_per_tick as u64);
        let fraction = if ops_target > 0 { n_ops as f64 / ops_target as f64 } else { 1.0 };
        let slack = if lambda.is_finite() { (model.service_rate - lambda).max(0.0) } else { 0.0 };
        let spare = serving.len() as f64 * slack * tick_ms as f64 / 1000.0 * model.maint_ops_per_req * fraction;
        let near = move |n: NodeId| !partitioned || !far_side(n as u64);

        let mut c = TickCounters::default();
        let retries = std::mem::take(&mut self.retry);
        for r in retries {
            let far = far_side(r.user as u64);
            let reach = move |n: NodeId| !partitioned || far_side(n as u64) == far;
            let outcome = self.db.read(&r.query, &mut self.sessions[r.user as usize], now, r.started, &reach);
            self.record_read(&mut c, outcome, r, now)?;
        }
        let mut used = 0.0;
        for i in 0..n_ops {
            let t = now + i * tick_ms / n_ops;
            let allowed = spare * (i + 1) as f64 / n_ops as f64;
            self.drain_until(&mut c, &mut used, allowed, t, &near)?;
            let Some(weights) = &self.op_weights else { break };
            let op = self.ops[weights.sample(&mut self.rng_w)].clone();
            let user = self.rng_w.gen_range(0..w.data_users);
            let far = far_side(user as u64);
            let reach = move |n: NodeId| !partitioned || far_side(n as u64) == far;
            c.attempted += 1;
            match op {
                OpKind::Read(name) => {
                    let params = self.random_params(&name, user);
                    let ci = self.db.catalog.template(&name).expect("validated");
                    let query = bind(&ci.template, &ci.def, &params).expect("generated params match");
                    let outcome = self.db.read(&query, &mut self.sessions[user as usize], t, t, &reach);
                    let pending = PendingRead { user, query, started: t };
                    self.record_read(&mut c, outcome, pending, t)?;
                }
                OpKind::Write(table) => {
                    let delete = self.rng_w.gen::<f64>() < w.delete_fraction;
                    let result = if delete {
                        self.random_delete(&table, user, t, &reach)
                    } else {
                        match random_row(&self.db, &table, user, w.data_users, &mut self.rng_w) {
                            Some(row) => self
                                .db
                                .write(&table, row, &mut self.sessions[user as usize], t, &reach)
                                .map(|_| ()),
                            None => Ok(()),
                        }
                    };
                    match result {
                        Ok(()) => c.writes += 1,
                        Err(PipelineError::Storage(StorageError::ReplicaUnavailable(_))) => c.failed_writes += 1,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        self.drain_until(&mut c, &mut used, spare, now + tick_ms - 1, &near)?;

        // maintenance health
        let end = now + tick_ms;
        let lag = self.db.lag_alarm(end);
        let min_headroom = self.db.queue().min_deadline().map(|d| d as i64 - end as i64);
        self.out.trace.push(TickTrace {
            tick,
            queue_depth: self.db.queue().len(),
            min_headroom_ms: min_headroom,
            tasks_applied: c.tasks as usize,
            deadline_misses: c.misses as usize,
        });

        // observations and control
        let per = f.controller.samples_per_observation;
        let mut rng = std::mem::replace(&mut self.rng_o, ChaCha8Rng::seed_from_u64(0));
        for &n in &serving {
            let lat = self.sample_latencies(&mut rng, lambda, per);
            let served = lambda * tick_ms as f64 / 1000.0;
            self.window.push_back(Observation {
                tick,
                node: n,
                request_rate: lambda,
                latencies_ms: lat,
                lag_headroom_ms: min_headroom,
                successes: (served * load_success).round() as u64,
                failures: (served * (1.0 - load_success)).round() as u64,
            });
            if self.window.len() > f.controller.observation_window {
                self.window.pop_front();
            }
        }
        self.rng_o = rng;
        self.forecaster.observe(now, rate);
        let mut action = String::new();
        if now.is_multiple_of(f.controller.interval_ms) {
            let all: Vec<Observation> = self.calibration.iter().chain(self.window.iter()).cloned().collect();
            if let Ok(m) = fit_model(&all, &self.fit) {
                self.model = Some(m);
            }
            if let Some(m) = &self.model {
                let c = &f.controller;
                let target = target_node_count(self.forecaster.forecast(), m, c.utilization, self.min_nodes)
                    .min(c.max_nodes);
                let a = self.planner.plan(now, self.cluster.len(), target, lag.at_risk());
                match a.kind {
                    ScalingKind::AddNodes(n) => {
                        let n = n.min(c.max_nodes.saturating_sub(self.cluster.len()));
                        if n > 0 {
                            self.cluster.add(n, now + c.boot_ms);
                            action = format!("add:{n}");
                        }
                    }
                    ScalingKind::RemoveNodes(n) => {
                        let gone = self.cluster.remove(n, self.min_nodes);
                        if !gone.is_empty() {
                            action = format!("remove:{}", gone.len());
                            bytes_moved += rebalance(&mut self.db, &self.cluster, now, self.replicas, c.split_rows);
                        }
                    }
                    ScalingKind::None => {}
                }
                if !action.is_empty() {
                    log::debug!("tick {tick}: {a}");
                }
            }
        }

        // arbitration
        let mut violations = BTreeSet::new();
        if partitioned {
            violations.insert(Axis::Availability);
            violations.insert(Axis::ReadConsistency);
        }
        if load_success < spec.availability_sla {
            violations.insert(Axis::Latency);
        }
        let under_replicated = self.db.stores().any(|s| {
            s.partitions()
                .iter()
                .any(|p| (p.replicas.len() as u32) < self.replicas.min(serving.len() as u32))
        });
        if under_replicated {
            violations.insert(Axis::Durability);
        }
        let sacrificed: Vec<&str> = arbitrate(&violations, &spec.priority_order)
            .into_iter()
            .filter(|(_, d)| *d == Disposition::Sacrificed)
            .map(|(a, _)| a.name())
            .collect();

        // costs and row
        self.node_hours += self.cluster.len() as f64 * tick_h;
        self.user_hours += users * tick_h;
        let data_ok = if c.attempted > 0 {
            (c.attempted - c.stalled_first - c.failed_first - c.failed_writes) as f64 / c.attempted as f64
        } else {
            1.0
        };
        let success = ((load_success * data_ok) * 1e6).round() / 1e6;
        c.staleness.sort_unstable();
        let cost = if self.user_hours > 0.0 { self.node_hours / self.user_hours } else { 0.0 };
        self.out.log.rows.push(MetricsRow {
            tick,
            time_ms: now,
            active_users: users,
            request_rate: rate,
            nodes: self.cluster.len(),
            serving_nodes: serving.len() as u32,
            latency_p50_ms: p50,
            latency_p99_ms: p99,
            latency_sla_ms: psla,
            success_fraction: success,
            reads: c.reads,
            writes: c.writes,
            stale_reads: c.stale,
            unflagged_stale: c.unflagged,
            stalled_reads: c.stalled,
            failed_reads: c.failed,
            failed_writes: c.failed_writes,
            staleness_p50_ms: c.staleness.get(c.staleness.len() / 2).copied().unwrap_or(0),
            staleness_max_ms: c.staleness.last().copied().unwrap_or(0),
            queue_depth: self.db.queue().len() as u64,
            min_headroom_ms: min_headroom,
            tasks_applied: c.tasks,
            deadline_misses: c.misses,
            node_hours: self.node_hours,
            user_hours: self.user_hours,
            cost_per_user: cost,
            arbitration_events: sacrificed.len() as u64,
            dispositions: sacrificed.join(";"),
            data_loss_events: data_loss,
            bytes_moved,
            action,
        });
        Ok(())
    }

    fn drain_until(
        &mut self,
        c: &mut TickCounters,
        used: &mut f64,
        allowed: f64,
        t: u64,
        reach: &dyn Fn(NodeId) -> bool,
    ) -> Result<(), SimError> {
        while *used < allowed && !self.db.queue().is_empty() {
            let r = self.db.drain(t, 1, reach)?;
            *used += r.ops as f64;
            c.tasks += r.applied.len() as u64;
            c.misses += r.deadline_misses as u64;
        }
        Ok(())
    }

    fn random_delete(
        &mut self,
        table: &str,
        user: u32,
        t: u64,
        reach: &dyn Fn(NodeId) -> bool,
    ) -> Result<(), PipelineError> {
        let rows = self.db.rows(table).expect("row table");
        let tbl = &rows.table;
        let owner = tbl.primary_key[0];
        let owned: Vec<Vec<Value>> = rows
            .lookup(owner, &Value::str(format!("u{user}")))
            .map(|(_, r)| tbl.primary_key.iter().map(|&i| r[i].clone()).collect())
            .collect();
        if owned.is_empty() {
            return Ok(());
        }
        let pk = owned[self.rng_w.gen_range(0..owned.len())].clone();
        self.db
            .delete(table, &pk, &mut self.sessions[user as usize], t, reach)
            .map(|_| ())
    }

    fn record_read(
        &mut self,
        c: &mut TickCounters,
        outcome: Result<ReadOutcome, PipelineError>,
        pending: PendingRead,
        t: u64,
    ) -> Result<(), SimError> {
        let first = pending.started == t;
        match outcome {
            Ok(ReadOutcome::Data {
                max_staleness_ms,
                stale,
                ..
            }) => {
                c.reads += 1;
                c.staleness.push(max_staleness_ms);
                if stale {
                    c.stale += 1;
                } else if max_staleness_ms > self.s.spec.staleness_bound_ms {
                    c.unflagged += 1;
                }
            }
            Ok(ReadOutcome::Stalled { .. }) => {
                c.stalled += 1;
                c.stalled_first += first as u64;
                self.retry.push(pending);
            }
            Ok(ReadOutcome::Failed(_)) | Err(PipelineError::Storage(_)) => {
                c.failed += 1;
                c.failed_first += first as u64;
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct TickCounters {
    attempted: u64,
    reads: u64,
    writes: u64,
    stale: u64,
    unflagged: u64,
    stalled: u64,
    stalled_first: u64,
    failed: u64,
    failed_first: u64,
    failed_writes: u64,
    tasks: u64,
    misses: u64,
    staleness: Vec<u64>,
}
