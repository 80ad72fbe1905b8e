use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::queue::{lag_alarm, DeadlineQueue, LagStatus, UpdateTask, DEFAULT_HEADROOM_FRACTION};
use super::rows::{Row, RowTable};
use crate::consistency::{Axis, ConsistencySpec, SessionGuarantee};
use crate::query::{expansion_order, Catalog, CompiledIndex, FieldMatch, KeySlot, MaintenanceRule, RangeQuery, Schema, Table};
use crate::storage::{
    decode_key, encode_values, CompositeKey, IndexStore, MergeRegistry, NodeId, PartitionId, PutOutcome,
    StorageError, Value, VersionedRecord,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown index `{0}`")]
    UnknownIndex(String),
    #[error("row for `{table}` has {actual} fields, expected {expected}")]
    Arity {
        table: String,
        expected: usize,
        actual: usize,
    },
    #[error("field `{table}.{field}` expects {expected}")]
    TypeMismatch {
        table: String,
        field: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("update function `{update_fn}` used {ops} primitive ops, over its budget of {budget}")]
    BudgetExceeded { update_fn: String, ops: u64, budget: u64 },
}

/// A committed change to one row of a table or mirror.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Change {
    pub table: String,
    pub key: CompositeKey,
    pub old: Option<Row>,
    pub new: Option<Row>,
    pub commit_ms: u64,
}

impl Change {
    /// Names of fields whose value differs; every field for inserts and deletes.
    pub fn changed_fields(&self, table: &Table) -> BTreeSet<String> {
        table
            .fields
            .iter()
            .enumerate()
            .filter(|(i, _)| match (&self.old, &self.new) {
                (Some(o), Some(n)) => o[*i] != n[*i],
                _ => true,
            })
            .map(|(_, f)| f.name.clone())
            .collect()
    }
}

/// One task per maintenance rule whose table and field match the change.
pub fn on_base_write(
    change: &Change,
    rules: &[MaintenanceRule],
    table: &Table,
    staleness_bound_ms: u64,
    now: u64,
) -> Vec<UpdateTask> {
    let changed = change.changed_fields(table);
    if changed.is_empty() {
        return Vec::new();
    }
    rules
        .iter()
        .enumerate()
        .filter(|(_, r)| r.table == change.table)
        .filter(|(_, r)| match &r.fields {
            FieldMatch::Any => true,
            FieldMatch::Fields(fs) => fs.iter().any(|f| changed.contains(f)),
        })
        .map(|(i, r)| UpdateTask {
            rule: i,
            index: r.index.clone(),
            source: change.table.clone(),
            key: change.key.clone(),
            old: change.old.clone(),
            new: change.new.clone(),
            commit_ms: change.commit_ms,
            enqueue_ms: now,
            deadline_ms: (change.commit_ms + staleness_bound_ms).max(now),
            seq: 0,
        })
        .collect()
}

/// Per-table last write and per-index last read seen by one client session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionToken {
    writes: BTreeMap<String, u64>,
    reads: BTreeMap<String, u64>,
}

impl SessionToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_write(&self, table: &str) -> Option<u64> {
        self.writes.get(table).copied()
    }

    pub fn last_read(&self, index: &str) -> Option<u64> {
        self.reads.get(index).copied()
    }

    pub fn record_write(&mut self, table: &str, commit_ms: u64) {
        let e = self.writes.entry(table.to_string()).or_insert(commit_ms);
        *e = (*e).max(commit_ms);
    }

    pub fn record_read(&mut self, index: &str, applied_seq: u64) {
        let e = self.reads.entry(index.to_string()).or_insert(applied_seq);
        *e = (*e).max(applied_seq);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadOutcome {
    Data {
        entries: Vec<(CompositeKey, VersionedRecord)>,
        max_staleness_ms: u64,
        /// Served past the staleness bound because availability outranks it.
        stale: bool,
    },
    /// Retry at `until`.
    Stalled { until: u64 },
    Failed(Axis),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOutcome {
    pub version: u64,
    /// False when last-write-wins discarded an older write.
    pub applied: bool,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedTask {
    pub rule: usize,
    pub index: String,
    pub deadline_ms: u64,
    pub ops: u64,
    pub missed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DrainReport {
    pub applied: Vec<AppliedTask>,
    pub ops: u64,
    pub deadline_misses: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub headroom_fraction: f64,
    /// Delay before a stalled read is retried.
    pub retry_ms: u64,
    pub writer_id: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            headroom_fraction: DEFAULT_HEADROOM_FRACTION,
            retry_ms: 1000,
            writer_id: 1,
        }
    }
}

/// Which source rows each index entry was derived from.
#[derive(Debug, Clone, Default)]
struct Lineage {
    by_row: BTreeMap<(String, CompositeKey), BTreeSet<CompositeKey>>,
    by_entry: BTreeMap<CompositeKey, Vec<(String, CompositeKey)>>,
}

impl Lineage {
    fn insert(&mut self, entry: CompositeKey, rows: Vec<(String, CompositeKey)>) {
        for r in &rows {
            self.by_row.entry(r.clone()).or_default().insert(entry.clone());
        }
        self.by_entry.insert(entry, rows);
    }

    fn remove(&mut self, entry: &CompositeKey) {
        for r in self.by_entry.remove(entry).unwrap_or_default() {
            if let Some(set) = self.by_row.get_mut(&r) {
                set.remove(entry);
                if set.is_empty() {
                    self.by_row.remove(&r);
                }
            }
        }
    }
}

type Path = Vec<(CompositeKey, Row)>;

/// Base tables, mirrors and maintained indices driven by one consistency spec.
#[derive(Debug)]
pub struct Database {
    pub schema: Schema,
    pub catalog: Catalog,
    pub spec: ConsistencySpec,
    pub config: PipelineConfig,
    merges: MergeRegistry,
    rows: BTreeMap<String, RowTable>,
    stores: BTreeMap<String, IndexStore>,
    lineage: BTreeMap<String, Lineage>,
    queue: DeadlineQueue,
    /// Commit times of queued tasks per target structure.
    pending: BTreeMap<String, BTreeMap<u64, usize>>,
}

impl Database {
    pub fn new(
        schema: Schema,
        catalog: Catalog,
        spec: ConsistencySpec,
        merges: MergeRegistry,
        nodes: &[NodeId],
    ) -> Self {
        let mut rows = BTreeMap::new();
        let mut stores = BTreeMap::new();
        for t in &schema.tables {
            rows.insert(t.name.clone(), RowTable::new(t.clone()));
            stores.insert(t.name.clone(), IndexStore::new(&t.name, nodes));
        }
        for m in &catalog.mirrors {
            let t = schema.table(&m.table).expect("mirror of a known table").clone();
            rows.insert(m.name.clone(), RowTable::new(t));
        }
        let mut lineage = BTreeMap::new();
        for ci in catalog.indices.iter().filter(|ci| !ci.def.base_table) {
            stores.insert(ci.def.name.clone(), IndexStore::new(&ci.def.name, nodes));
            lineage.insert(ci.def.name.clone(), Lineage::default());
        }
        Database {
            schema,
            catalog,
            spec,
            config: PipelineConfig::default(),
            merges,
            rows,
            stores,
            lineage,
            queue: DeadlineQueue::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn rows(&self, table: &str) -> Option<&RowTable> {
        self.rows.get(table)
    }

    pub fn store(&self, name: &str) -> Option<&IndexStore> {
        self.stores.get(name)
    }

    pub fn store_mut(&mut self, name: &str) -> Option<&mut IndexStore> {
        self.stores.get_mut(name)
    }

    pub fn stores(&self) -> impl Iterator<Item = &IndexStore> {
        self.stores.values()
    }

    pub fn stores_mut(&mut self) -> impl Iterator<Item = &mut IndexStore> {
        self.stores.values_mut()
    }

    pub fn queue(&self) -> &DeadlineQueue {
        &self.queue
    }

    pub fn lag_alarm(&self, now: u64) -> LagStatus {
        lag_alarm(&self.queue, now, self.spec.staleness_bound_ms, self.config.headroom_fraction)
    }

    /// Authoritative contents of a maintained index: key to referenced primary key.
    pub fn index_entries(&self, name: &str) -> BTreeMap<CompositeKey, Vec<u8>> {
        self.stores
            .get(name)
            .map(|s| s.iter().map(|(k, v)| (k.clone(), v.value.clone())).collect())
            .unwrap_or_default()
    }

    fn check_row(&self, table: &Table, row: &[Value]) -> Result<(), PipelineError> {
        if row.len() != table.fields.len() {
            return Err(PipelineError::Arity {
                table: table.name.clone(),
                expected: table.fields.len(),
                actual: row.len(),
            });
        }
        for (f, v) in table.fields.iter().zip(row) {
            if f.kind != v.kind() {
                return Err(PipelineError::TypeMismatch {
                    table: table.name.clone(),
                    field: f.name.clone(),
                    expected: f.kind.name(),
                });
            }
        }
        Ok(())
    }

    /// Inserts or replaces a base row under the spec's write policy.
    pub fn write(
        &mut self,
        table: &str,
        row: Row,
        session: &mut SessionToken,
        now: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<WriteOutcome, PipelineError> {
        let t = self
            .schema
            .table(table)
            .ok_or_else(|| PipelineError::UnknownTable(table.into()))?
            .clone();
        self.check_row(&t, &row)?;
        let kinds = t.kinds();
        let pk = self.rows[table].pk_of(&row);
        let incoming = encode_values(&row).into_bytes();
        let rec = VersionedRecord::new(incoming.clone(), now, self.config.writer_id);
        let store = self.stores.get_mut(table).expect("store per table");
        let version = match store.put(pk.clone(), rec, &self.spec.write_policy, &self.merges, now, reachable)? {
            PutOutcome::Applied { version } => version,
            PutOutcome::Stale { stored } => {
                return Ok(WriteOutcome {
                    version: stored,
                    applied: false,
                    tasks: 0,
                })
            }
        };
        let stored = store.get(&pk).expect("just written").value.clone();
        let new_row = match decode_key(&stored, &kinds) {
            Ok(r) => r,
            Err(_) => {
                // merge output that is not a row: keep the incoming row
                let rec = VersionedRecord::new(incoming, version, self.config.writer_id);
                store.upsert(pk.clone(), rec, now, reachable);
                row
            }
        };
        session.record_write(table, now);
        let tasks = self.commit_change(table, pk, Some(new_row), now, now);
        Ok(WriteOutcome {
            version,
            applied: true,
            tasks,
        })
    }

    /// Deletes a base row by primary key values.
    pub fn delete(
        &mut self,
        table: &str,
        pk_values: &[Value],
        session: &mut SessionToken,
        now: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<usize, PipelineError> {
        let t = self
            .schema
            .table(table)
            .ok_or_else(|| PipelineError::UnknownTable(table.into()))?;
        let pk_kinds = t.pk_kinds();
        if pk_values.len() != pk_kinds.len() {
            return Err(PipelineError::Arity {
                table: table.into(),
                expected: pk_kinds.len(),
                actual: pk_values.len(),
            });
        }
        let pk = encode_values(pk_values);
        let store = self.stores.get_mut(table).expect("store per table");
        if store.delete(&pk, now, reachable).is_none() {
            return Ok(0);
        }
        session.record_write(table, now);
        Ok(self.commit_change(table, pk, None, now, now))
    }

    fn commit_change(&mut self, source: &str, pk: CompositeKey, new: Option<Row>, commit_ms: u64, now: u64) -> usize {
        let rows = self.rows.get_mut(source).expect("row table");
        let old = rows.set(pk.clone(), new.clone());
        if old == new {
            return 0;
        }
        let table = rows.table.clone();
        let change = Change {
            table: source.to_string(),
            key: pk,
            old,
            new,
            commit_ms,
        };
        let tasks = on_base_write(&change, &self.catalog.rules, &table, self.spec.staleness_bound_ms, now);
        let n = tasks.len();
        for t in tasks {
            self.enqueue(t);
        }
        n
    }

    fn enqueue(&mut self, task: UpdateTask) {
        *self
            .pending
            .entry(task.index.clone())
            .or_default()
            .entry(task.commit_ms)
            .or_insert(0) += 1;
        self.queue.push(task);
    }

    fn settle(&mut self, task: &UpdateTask) {
        if let Some(m) = self.pending.get_mut(&task.index) {
            if let Some(c) = m.get_mut(&task.commit_ms) {
                *c -= 1;
                if *c == 0 {
                    m.remove(&task.commit_ms);
                }
            }
        }
    }

    /// Applies up to `capacity` tasks in deadline order.
    pub fn drain(
        &mut self,
        now: u64,
        capacity: usize,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<DrainReport, PipelineError> {
        let mut report = DrainReport::default();
        let mut last_deadline = 0;
        while report.applied.len() < capacity {
            let Some(task) = self.queue.pop() else { break };
            assert!(task.deadline_ms >= last_deadline, "deadline order violated");
            last_deadline = task.deadline_ms;
            let rule = self.catalog.rules[task.rule].clone();
            let (ops, done) = self.apply(&task, now, reachable);
            if !done {
                // Leftover cleanup runs as a continuation at the same deadline.
                self.enqueue(task.clone());
            }
            self.settle(&task);
            if ops > rule.op_budget {
                return Err(PipelineError::BudgetExceeded {
                    update_fn: rule.update_fn,
                    ops,
                    budget: rule.op_budget,
                });
            }
            let missed = now > task.due_ms(self.spec.staleness_bound_ms);
            report.deadline_misses += missed as usize;
            report.ops += ops;
            report.applied.push(AppliedTask {
                rule: task.rule,
                index: task.index.clone(),
                deadline_ms: task.deadline_ms,
                ops,
                missed,
            });
        }
        Ok(report)
    }

    /// Drains until the queue is empty.
    pub fn drain_all(&mut self, now: u64, reachable: &dyn Fn(NodeId) -> bool) -> Result<DrainReport, PipelineError> {
        let mut total = DrainReport::default();
        while !self.queue.is_empty() {
            let r = self.drain(now, usize::MAX, reachable)?;
            total.applied.extend(r.applied);
            total.ops += r.ops;
            total.deadline_misses += r.deadline_misses;
        }
        Ok(total)
    }

    /// Returns the ops spent and whether the task finished within its budget.
    fn apply(&mut self, task: &UpdateTask, now: u64, reachable: &dyn Fn(NodeId) -> bool) -> (u64, bool) {
        let rule = &self.catalog.rules[task.rule];
        let (index, source, budget) = (rule.index.clone(), rule.table.clone(), rule.op_budget);
        let mut ops = 0;
        let mut done = true;
        let mut mirror_change = None;
        if self.catalog.mirror(&index).is_some_and(|m| m.table == source) {
            ops += 2;
            let current = self.rows[&source].get(&task.key).cloned();
            let mirror = self.rows.get_mut(&index).expect("mirror rows");
            let old = mirror.set(task.key.clone(), current.clone());
            if old != current {
                mirror_change = Some((old, current));
            }
        }
        let ci = self
            .catalog
            .index(&index)
            .filter(|ci| !ci.def.base_table && ci.sources.contains(&source))
            .cloned();
        if let Some(ci) = ci {
            let (spent, finished) = self.refresh(&ci, &source, &task.key, task.commit_ms, reachable, budget.saturating_sub(ops));
            ops += spent;
            done = finished;
        }
        if let Some((old, new)) = mirror_change {
            let change = Change {
                table: index.clone(),
                key: task.key.clone(),
                old,
                new,
                commit_ms: task.commit_ms,
            };
            let table = self.rows[&index].table.clone();
            for t in on_base_write(&change, &self.catalog.rules, &table, self.spec.staleness_bound_ms, now) {
                self.enqueue(t);
            }
        }
        (ops, done)
    }

    /// Brings every entry of `ci` that passes through row `pk` of `source` up
    /// to date. Outdated entries beyond what `budget` allows are left in place
    /// and the second value is false.
    fn refresh(
        &mut self,
        ci: &CompiledIndex,
        source: &str,
        pk: &CompositeKey,
        commit_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
        budget: u64,
    ) -> (u64, bool) {
        let mut ops = 1;
        let row = self.rows[source].get(pk).cloned();
        ops += 1;
        let lineage_key = (source.to_string(), pk.clone());
        let stale: BTreeSet<CompositeKey> = self.lineage[&ci.def.name]
            .by_row
            .get(&lineage_key)
            .cloned()
            .unwrap_or_default();
        let mut fresh: BTreeMap<CompositeKey, Path> = BTreeMap::new();
        if let Some(row) = row {
            for start in (0..ci.sources.len()).filter(|&p| ci.sources[p] == source) {
                for path in self.enumerate(ci, start, pk, &row, &mut ops) {
                    fresh.insert(entry_key(ci, &path), path);
                }
            }
        }
        let doomed: Vec<CompositeKey> = stale.iter().filter(|k| !fresh.contains_key(*k)).cloned().collect();
        let inserts: Vec<(CompositeKey, Path)> = fresh.into_iter().filter(|(k, _)| !stale.contains(k)).collect();
        let room = budget.saturating_sub(ops + inserts.len() as u64) as usize;
        let done = doomed.len() <= room;
        let store = self.stores.get_mut(&ci.def.name).expect("index store");
        let lineage = self.lineage.get_mut(&ci.def.name).expect("index lineage");
        for (key, path) in inserts {
            ops += 1;
            let value = path[ci.def.target].0.as_bytes().to_vec();
            let rec = VersionedRecord::new(value, store.log_head() + 1, 0);
            store.upsert(key.clone(), rec, commit_ms, reachable);
            let rows = path
                .into_iter()
                .enumerate()
                .map(|(p, (k, _))| (ci.sources[p].clone(), k))
                .collect();
            lineage.insert(key, rows);
        }
        for key in doomed.iter().take(room) {
            ops += 1;
            store.delete(key, commit_ms, reachable);
            lineage.remove(key);
        }
        (ops, done)
    }

    /// Every complete path through `row` placed at chain position `start`.
    fn enumerate(&self, ci: &CompiledIndex, start: usize, pk: &CompositeKey, row: &Row, ops: &mut u64) -> Vec<Path> {
        let t = &ci.template;
        let mut first = vec![None; t.chain.len()];
        first[start] = Some((pk.clone(), row.clone()));
        let mut paths = vec![first];
        for step in expansion_order(t, start) {
            let table = &self.rows[&ci.sources[step.to.pos]];
            let mut next = Vec::new();
            for path in paths {
                *ops += 1;
                let value = &path[step.from.pos].as_ref().expect("expanded").1[step.from.field];
                for (k, r) in table.lookup(step.to.field, value) {
                    let mut p = path.clone();
                    p[step.to.pos] = Some((k.clone(), r.clone()));
                    next.push(p);
                }
            }
            paths = next;
        }
        paths
            .into_iter()
            .map(|p| p.into_iter().map(|s| s.expect("complete path")).collect::<Path>())
            .filter(|p| {
                t.params.iter().all(|param| {
                    let mut vals = param.predicates.iter().map(|f| &p[f.pos].1[f.field]);
                    let first = vals.next();
                    vals.all(|v| Some(v) == first)
                })
            })
            .collect()
    }

    fn upstream_tables(&self, index: &str) -> Result<BTreeSet<String>, PipelineError> {
        if self.schema.table(index).is_some() {
            return Ok(BTreeSet::from([index.to_string()]));
        }
        if self.catalog.index(index).is_none() {
            return Err(PipelineError::UnknownIndex(index.into()));
        }
        Ok(self.catalog.upstream_tables(index))
    }

    /// Commit time of the oldest write not yet reflected in the index's maintenance queue.
    fn oldest_pending(&self, index: &str) -> Option<u64> {
        self.catalog
            .upstream_structures(index)
            .iter()
            .filter_map(|s| self.pending.get(s).and_then(|m| m.keys().next().copied()))
            .min()
    }

    /// Commit time of the oldest write not yet visible on `node`'s replica of
    /// partition `pid`; `None` when it is fully caught up.
    pub fn oldest_unapplied(&self, index: &str, pid: PartitionId, node: NodeId) -> Option<u64> {
        let store = self.stores.get(index)?;
        let backlog = store.partition(pid)?.replica(node)?.oldest_unapplied_commit();
        [self.oldest_pending(index), backlog].into_iter().flatten().min()
    }

    /// Staleness of a replica: time since the oldest write it has not applied.
    pub fn staleness_ms(&self, index: &str, pid: PartitionId, node: NodeId, now: u64) -> u64 {
        self.oldest_unapplied(index, pid, node)
            .map_or(0, |o| now.saturating_sub(o))
    }

    fn wait_or_fail(&self, axis: Axis, now: u64, started_ms: u64) -> ReadOutcome {
        if now.saturating_sub(started_ms) > self.spec.latency_sla.bound_ms {
            ReadOutcome::Failed(axis)
        } else {
            ReadOutcome::Stalled {
                until: now + self.config.retry_ms,
            }
        }
    }

    /// Serves a range read under the spec's staleness bound, session
    /// guarantees and priority order. `started_ms` is when the client first
    /// issued the read.
    pub fn read(
        &self,
        q: &RangeQuery,
        session: &mut SessionToken,
        now: u64,
        started_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<ReadOutcome, PipelineError> {
        let upstream = self.upstream_tables(&q.index)?;
        let store = self
            .stores
            .get(&q.index)
            .ok_or_else(|| PipelineError::UnknownIndex(q.index.clone()))?;
        let pending = self.oldest_pending(&q.index);
        let ryw = self.spec.requires(SessionGuarantee::ReadYourWrites);
        let mr = self.spec.requires(SessionGuarantee::MonotonicReads);
        let head = store.log_head();
        let mut chosen: BTreeMap<PartitionId, (NodeId, u64, u64)> = BTreeMap::new();
        for p in store.partitions_for_range(&q.low, q.high.as_ref())? {
            let mut any_reachable = false;
            let mut best: Option<(NodeId, u64, u64)> = None;
            for r in p.replicas.iter().filter(|r| reachable(r.node)) {
                any_reachable = true;
                let oldest = [pending, r.oldest_unapplied_commit()].into_iter().flatten().min();
                let applied = r.applied_seq(head);
                let sees_writes = !ryw
                    || upstream
                        .iter()
                        .filter_map(|t| session.last_write(t))
                        .all(|c| oldest.is_none_or(|o| o > c));
                let monotonic = !mr || session.last_read(&q.index).is_none_or(|s| applied >= s);
                if !(sees_writes && monotonic) {
                    continue;
                }
                let staleness = oldest.map_or(0, |o| now.saturating_sub(o));
                if best.is_none_or(|b| staleness < b.1) {
                    best = Some((r.node, staleness, applied));
                }
            }
            match best {
                Some(b) => {
                    chosen.insert(p.id, b);
                }
                None if !any_reachable => return Ok(self.wait_or_fail(Axis::Availability, now, started_ms)),
                None => return Ok(self.wait_or_fail(Axis::ReadConsistency, now, started_ms)),
            }
        }
        let max_staleness_ms = chosen.values().map(|c| c.1).max().unwrap_or(0);
        let stale = max_staleness_ms > self.spec.staleness_bound_ms;
        if stale && !self.spec.outranks(Axis::Availability, Axis::ReadConsistency) {
            return Ok(self.wait_or_fail(Axis::ReadConsistency, now, started_ms));
        }
        let entries = store.get_range_with(&q.low, q.high.as_ref(), q.limit as usize, |p| {
            chosen.get(&p.id).map(|c| c.0)
        })?;
        if let Some(min_applied) = chosen.values().map(|c| c.2).min() {
            session.record_read(&q.index, min_applied);
        }
        Ok(ReadOutcome::Data {
            entries,
            max_staleness_ms,
            stale,
        })
    }

    /// Rows referenced by index entries, resolved against the authoritative base table.
    pub fn resolve(&self, index: &str, entries: &[(CompositeKey, VersionedRecord)]) -> Vec<Row> {
        if let Some(t) = self.schema.table(index) {
            let kinds = t.kinds();
            return entries
                .iter()
                .filter_map(|(_, v)| decode_key(&v.value, &kinds).ok())
                .collect();
        }
        let Some(ci) = self.catalog.index(index) else {
            return Vec::new();
        };
        let table = &ci.template.chain[ci.def.target].table;
        entries
            .iter()
            .filter_map(|(_, v)| self.rows[table].get(&CompositeKey::from_bytes(v.value.clone())).cloned())
            .collect()
    }
}

/// Index key for one path: parameters, order field, then every position's primary key.
pub fn entry_key(ci: &CompiledIndex, path: &[(CompositeKey, Row)]) -> CompositeKey {
    let t = &ci.template;
    let values: Vec<Value> = ci
        .def
        .slots
        .iter()
        .map(|slot| {
            let f = match slot {
                KeySlot::Param(i) => t.params[*i].predicates[0],
                KeySlot::Order(f) | KeySlot::Pk(f) => *f,
            };
            path[f.pos].1[f.field].clone()
        })
        .collect();
    encode_values(&values)
}
