use std::collections::{BTreeMap, VecDeque};
use std::ops::Bound;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::key::CompositeKey;
use super::merge::MergeRegistry;
use crate::consistency::WritePolicy;

pub type NodeId = u32;
pub type PartitionId = u64;

/// Reads may touch at most this many partitions unless configured otherwise.
pub const DEFAULT_MAX_PARTITIONS_PER_READ: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedRecord {
    pub value: Vec<u8>,
    /// Logical timestamp in simulation milliseconds (or a log sequence for
    /// derived index entries).
    pub version: u64,
    pub writer: u32,
}

impl VersionedRecord {
    pub fn new(value: impl Into<Vec<u8>>, version: u64, writer: u32) -> Self {
        Self {
            value: value.into(),
            version,
            writer,
        }
    }

    fn stamp(&self) -> (u64, u32) {
        (self.version, self.writer)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("no reachable replica for partition {0}")]
    ReplicaUnavailable(PartitionId),
    #[error("range spans {spans} partitions, more than the limit of {limit}")]
    RangeTooWide { spans: usize, limit: usize },
    #[error("write conflict: expected version {expected:?}, found {found:?}")]
    Conflict {
        expected: Option<u64>,
        found: Option<u64>,
    },
    #[error("unknown merge function `{0}`")]
    UnknownMergeFunction(String),
    #[error("split key is not strictly inside partition {0}")]
    InvalidSplitKey(PartitionId),
    #[error("partitions {0} and {1} are not adjacent")]
    NonAdjacent(PartitionId, PartitionId),
    #[error("unknown partition {0}")]
    UnknownPartition(PartitionId),
    #[error("range [low, high) is empty")]
    EmptyRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PutOutcome {
    Applied { version: u64 },
    /// Last-write-wins rejected an older version.
    Stale { stored: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaChoice {
    /// The authoritative copy (the partition leader's log head).
    Primary,
    Node(NodeId),
}

#[derive(Debug, Clone)]
struct PendingWrite {
    seq: u64,
    commit_ms: u64,
    key: CompositeKey,
    record: Option<VersionedRecord>,
}

/// One physical copy of a partition. Its state is always a prefix of the
/// partition's write log; writes it could not receive wait in the backlog.
#[derive(Debug, Clone)]
pub struct Replica {
    pub node: NodeId,
    data: BTreeMap<CompositeKey, VersionedRecord>,
    backlog: VecDeque<PendingWrite>,
}

impl Replica {
    fn apply(&mut self, w: PendingWrite) {
        match w.record {
            Some(r) => {
                self.data.insert(w.key, r);
            }
            None => {
                self.data.remove(&w.key);
            }
        }
    }

    /// Commit time of the oldest write this replica has not applied.
    pub fn oldest_unapplied_commit(&self) -> Option<u64> {
        self.backlog.iter().map(|w| w.commit_ms).min()
    }

    /// Highest log sequence such that every write up to it is applied.
    pub fn applied_seq(&self, log_head: u64) -> u64 {
        self.backlog.front().map_or(log_head, |w| w.seq - 1)
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.len()
    }

    pub fn get(&self, key: &CompositeKey) -> Option<&VersionedRecord> {
        self.data.get(key)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Contiguous key range `[low, high)` with its replica set.
#[derive(Debug, Clone)]
pub struct Partition {
    pub id: PartitionId,
    pub low: CompositeKey,
    pub high: Option<CompositeKey>,
    primary: BTreeMap<CompositeKey, VersionedRecord>,
    pub replicas: Vec<Replica>,
}

impl Partition {
    pub fn contains(&self, key: &CompositeKey) -> bool {
        key >= &self.low && self.high.as_ref().is_none_or(|h| key < h)
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.replicas.first().map(|r| r.node)
    }

    pub fn replica(&self, node: NodeId) -> Option<&Replica> {
        self.replicas.iter().find(|r| r.node == node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.replicas.iter().map(|r| r.node)
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.primary
            .iter()
            .map(|(k, v)| (k.len() + v.value.len() + 12) as u64)
            .sum()
    }

    fn overlaps(&self, low: &CompositeKey, high: Option<&CompositeKey>) -> bool {
        let starts_before_high = high.is_none_or(|h| &self.low < h);
        let ends_after_low = self.high.as_ref().is_none_or(|h| h > low);
        starts_before_high && ends_after_low
    }

    fn range_of<'a>(
        map: &'a BTreeMap<CompositeKey, VersionedRecord>,
        low: &CompositeKey,
        high: Option<&CompositeKey>,
    ) -> impl Iterator<Item = (&'a CompositeKey, &'a VersionedRecord)> {
        let upper = match high {
            Some(h) => Bound::Excluded(h.clone()),
            None => Bound::Unbounded,
        };
        map.range((Bound::Included(low.clone()), upper))
    }
}

/// All partitions of one table or index.
#[derive(Debug, Clone)]
pub struct IndexStore {
    pub name: String,
    partitions: Vec<Partition>,
    /// Sequence number of the last write shipped to replicas.
    log_head: u64,
    next_id: PartitionId,
    pub max_partitions_per_read: usize,
}

impl IndexStore {
    /// A single partition covering the whole key space, replicated on `nodes`.
    pub fn new(name: impl Into<String>, nodes: &[NodeId]) -> Self {
        let replicas = nodes
            .iter()
            .map(|&node| Replica {
                node,
                data: BTreeMap::new(),
                backlog: VecDeque::new(),
            })
            .collect();
        IndexStore {
            name: name.into(),
            partitions: vec![Partition {
                id: 0,
                low: CompositeKey::default(),
                high: None,
                primary: BTreeMap::new(),
                replicas,
            }],
            log_head: 0,
            next_id: 1,
            max_partitions_per_read: DEFAULT_MAX_PARTITIONS_PER_READ,
        }
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn partition(&self, id: PartitionId) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.id == id)
    }

    pub fn log_head(&self) -> u64 {
        self.log_head
    }

    pub fn len(&self) -> usize {
        self.partitions.iter().map(Partition::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, key: &CompositeKey) -> usize {
        // partitions are sorted and cover the key space
        self.partitions
            .partition_point(|p| p.high.as_ref().is_some_and(|h| h <= key))
    }

    pub fn partition_for(&self, key: &CompositeKey) -> &Partition {
        &self.partitions[self.locate(key)]
    }

    /// Authoritative value for `key`.
    pub fn get(&self, key: &CompositeKey) -> Option<&VersionedRecord> {
        self.partitions[self.locate(key)].primary.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CompositeKey, &VersionedRecord)> {
        self.partitions.iter().flat_map(|p| p.primary.iter())
    }

    fn ship(
        &mut self,
        idx: usize,
        key: CompositeKey,
        record: Option<VersionedRecord>,
        commit_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) {
        self.log_head += 1;
        let w = PendingWrite {
            seq: self.log_head,
            commit_ms,
            key,
            record,
        };
        for r in &mut self.partitions[idx].replicas {
            if reachable(r.node) && r.backlog.is_empty() {
                r.apply(w.clone());
            } else {
                r.backlog.push_back(w.clone());
            }
        }
    }

    /// Writes under `policy`. Serializable writes are ordered at the
    /// partition leader and get a version above anything stored.
    pub fn put(
        &mut self,
        key: CompositeKey,
        record: VersionedRecord,
        policy: &WritePolicy,
        merges: &MergeRegistry,
        commit_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<PutOutcome, StorageError> {
        let idx = self.locate(&key);
        let part = &self.partitions[idx];
        let stored = part.primary.get(&key);
        let next = match policy {
            WritePolicy::LastWriteWins => {
                if let Some(s) = stored {
                    if record.stamp() <= s.stamp() {
                        return Ok(PutOutcome::Stale { stored: s.version });
                    }
                }
                record
            }
            WritePolicy::Merge(name) => {
                let f = merges
                    .get(name)
                    .ok_or_else(|| StorageError::UnknownMergeFunction(name.clone()))?;
                match stored {
                    Some(s) => VersionedRecord {
                        value: f(&s.value, &record.value),
                        version: s.version.max(record.version),
                        writer: if record.stamp() > s.stamp() { record.writer } else { s.writer },
                    },
                    None => record,
                }
            }
            WritePolicy::Serializable => {
                if !part.leader().is_some_and(reachable) {
                    return Err(StorageError::ReplicaUnavailable(part.id));
                }
                let floor = stored.map_or(0, |s| s.version + 1);
                VersionedRecord {
                    version: record.version.max(floor),
                    ..record
                }
            }
        };
        let version = next.version;
        self.partitions[idx].primary.insert(key.clone(), next.clone());
        self.ship(idx, key, Some(next), commit_ms, reachable);
        Ok(PutOutcome::Applied { version })
    }

    /// Serializable compare-and-set: fails with `Conflict` unless the stored
    /// version equals `expected` (`None` meaning absent).
    pub fn put_if_version(
        &mut self,
        key: CompositeKey,
        record: VersionedRecord,
        expected: Option<u64>,
        commit_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<PutOutcome, StorageError> {
        let found = self.get(&key).map(|r| r.version);
        if found != expected {
            return Err(StorageError::Conflict { expected, found });
        }
        self.put(
            key,
            record,
            &WritePolicy::Serializable,
            &MergeRegistry::empty(),
            commit_ms,
            reachable,
        )
    }

    /// Unconditional write used by index maintenance.
    pub fn upsert(
        &mut self,
        key: CompositeKey,
        record: VersionedRecord,
        commit_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) {
        let idx = self.locate(&key);
        self.partitions[idx].primary.insert(key.clone(), record.clone());
        self.ship(idx, key, Some(record), commit_ms, reachable);
    }

    pub fn delete(
        &mut self,
        key: &CompositeKey,
        commit_ms: u64,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Option<VersionedRecord> {
        let idx = self.locate(key);
        let old = self.partitions[idx].primary.remove(key)?;
        self.ship(idx, key.clone(), None, commit_ms, reachable);
        Some(old)
    }

    /// Delivers backlogged writes to every replica that is now reachable.
    pub fn sync(&mut self, reachable: &dyn Fn(NodeId) -> bool) -> usize {
        let mut delivered = 0;
        for p in &mut self.partitions {
            for r in p.replicas.iter_mut().filter(|r| reachable(r.node)) {
                while let Some(w) = r.backlog.pop_front() {
                    r.apply(w);
                    delivered += 1;
                }
            }
        }
        delivered
    }

    /// Partitions intersecting `[low, high)`.
    pub fn partitions_for_range(
        &self,
        low: &CompositeKey,
        high: Option<&CompositeKey>,
    ) -> Result<Vec<&Partition>, StorageError> {
        if high.is_some_and(|h| h <= low) {
            return Err(StorageError::EmptyRange);
        }
        let hits: Vec<&Partition> = self.partitions.iter().filter(|p| p.overlaps(low, high)).collect();
        if hits.len() > self.max_partitions_per_read {
            return Err(StorageError::RangeTooWide {
                spans: hits.len(),
                limit: self.max_partitions_per_read,
            });
        }
        Ok(hits)
    }

    /// Entries in `[low, high)` in key order, at most `limit`, from one
    /// replica per intersecting partition.
    pub fn get_range(
        &self,
        low: &CompositeKey,
        high: Option<&CompositeKey>,
        limit: usize,
        choice: ReplicaChoice,
        reachable: &dyn Fn(NodeId) -> bool,
    ) -> Result<Vec<(CompositeKey, VersionedRecord)>, StorageError> {
        let mut out = Vec::new();
        for p in self.partitions_for_range(low, high)? {
            let map = match choice {
                ReplicaChoice::Primary => &p.primary,
                ReplicaChoice::Node(n) => match p.replica(n) {
                    Some(r) if reachable(n) => &r.data,
                    _ => return Err(StorageError::ReplicaUnavailable(p.id)),
                },
            };
            for (k, v) in Partition::range_of(map, low, high) {
                if out.len() >= limit {
                    return Ok(out);
                }
                out.push((k.clone(), v.clone()));
            }
        }
        Ok(out)
    }

    /// Range read using a per-partition replica choice.
    pub fn get_range_with(
        &self,
        low: &CompositeKey,
        high: Option<&CompositeKey>,
        limit: usize,
        mut pick: impl FnMut(&Partition) -> Option<NodeId>,
    ) -> Result<Vec<(CompositeKey, VersionedRecord)>, StorageError> {
        let mut out = Vec::new();
        for p in self.partitions_for_range(low, high)? {
            let node = pick(p).ok_or(StorageError::ReplicaUnavailable(p.id))?;
            let r = p.replica(node).ok_or(StorageError::ReplicaUnavailable(p.id))?;
            for (k, v) in Partition::range_of(&r.data, low, high) {
                if out.len() >= limit {
                    return Ok(out);
                }
                out.push((k.clone(), v.clone()));
            }
        }
        Ok(out)
    }

    fn position(&self, id: PartitionId) -> Result<usize, StorageError> {
        self.partitions
            .iter()
            .position(|p| p.id == id)
            .ok_or(StorageError::UnknownPartition(id))
    }

    /// Splits a partition at `split_key`; returns the child ids and the bytes
    /// rewritten into the right child across its replicas.
    pub fn split_partition(
        &mut self,
        id: PartitionId,
        split_key: CompositeKey,
    ) -> Result<(PartitionId, PartitionId, u64), StorageError> {
        let idx = self.position(id)?;
        let p = &self.partitions[idx];
        if split_key <= p.low || p.high.as_ref().is_some_and(|h| &split_key >= h) {
            return Err(StorageError::InvalidSplitKey(id));
        }
        let mut left = self.partitions.remove(idx);
        let right_primary = left.primary.split_off(&split_key);
        let right_replicas = left
            .replicas
            .iter_mut()
            .map(|r| {
                let data = r.data.split_off(&split_key);
                let (l, rb): (VecDeque<_>, VecDeque<_>) =
                    r.backlog.drain(..).partition(|w| w.key < split_key);
                r.backlog = l;
                Replica {
                    node: r.node,
                    data,
                    backlog: rb,
                }
            })
            .collect::<Vec<_>>();
        let left_id = self.next_id;
        let right_id = self.next_id + 1;
        self.next_id += 2;
        let right = Partition {
            id: right_id,
            low: split_key.clone(),
            high: left.high.take(),
            primary: right_primary,
            replicas: right_replicas,
        };
        left.id = left_id;
        left.high = Some(split_key);
        let moved = right.bytes() * right.replicas.len() as u64;
        self.partitions.insert(idx, right);
        self.partitions.insert(idx, left);
        Ok((left_id, right_id, moved))
    }

    /// Merges two adjacent partitions into one on the left partition's
    /// replica set; returns the new id and bytes moved.
    pub fn merge_partitions(
        &mut self,
        a: PartitionId,
        b: PartitionId,
    ) -> Result<(PartitionId, u64), StorageError> {
        let ia = self.position(a)?;
        let ib = self.position(b)?;
        let (il, ir) = if ia < ib { (ia, ib) } else { (ib, ia) };
        if ir != il + 1 {
            return Err(StorageError::NonAdjacent(a, b));
        }
        let right = self.partitions.remove(ir);
        let left = &mut self.partitions[il];
        let same_nodes = left.nodes().eq(right.nodes());
        let moved = if same_nodes {
            0
        } else {
            right.bytes() * left.replicas.len() as u64
        };
        let right_rows: Vec<(CompositeKey, VersionedRecord)> =
            right.primary.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        left.primary.extend(right.primary);
        left.high = right.high;
        if same_nodes {
            for (l, r) in left.replicas.iter_mut().zip(right.replicas) {
                l.data.extend(r.data);
                l.backlog.extend(r.backlog);
                l.backlog.make_contiguous().sort_by_key(|w| w.seq);
            }
        } else {
            // right-hand data moves onto the left replica set
            let moved_rows: Vec<_> = right_rows;
            for l in &mut left.replicas {
                for (k, v) in &moved_rows {
                    l.data.insert(k.clone(), v.clone());
                }
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        left.id = id;
        Ok((id, moved))
    }

    /// Places a fresh replica on `node`, copied from the authoritative state.
    pub fn add_replica(&mut self, id: PartitionId, node: NodeId) -> Result<u64, StorageError> {
        let idx = self.position(id)?;
        let p = &mut self.partitions[idx];
        if p.replica(node).is_some() {
            return Ok(0);
        }
        let bytes = p.bytes();
        p.replicas.push(Replica {
            node,
            data: p.primary.clone(),
            backlog: VecDeque::new(),
        });
        Ok(bytes)
    }

    pub fn remove_replica(&mut self, id: PartitionId, node: NodeId) -> Result<bool, StorageError> {
        let idx = self.position(id)?;
        let p = &mut self.partitions[idx];
        let before = p.replicas.len();
        p.replicas.retain(|r| r.node != node);
        Ok(p.replicas.len() != before)
    }

    /// Median key of a partition, if it has at least two entries.
    pub fn split_point(&self, id: PartitionId) -> Option<CompositeKey> {
        let p = self.partition(id)?;
        if p.primary.len() < 2 {
            return None;
        }
        p.primary.keys().nth(p.primary.len() / 2).cloned()
    }

    /// Partitions are sorted, disjoint, and cover the key space.
    pub fn check_coverage(&self) -> Result<(), String> {
        let first = self.partitions.first().ok_or("no partitions")?;
        if !first.low.is_empty() {
            return Err("first partition does not start at the empty key".into());
        }
        for w in self.partitions.windows(2) {
            if w[0].high.as_ref() != Some(&w[1].low) {
                return Err(format!("gap or overlap between {} and {}", w[0].id, w[1].id));
            }
        }
        if self.partitions.last().is_some_and(|p| p.high.is_some()) {
            return Err("last partition is bounded".into());
        }
        for p in &self.partitions {
            if let Some(k) = p.primary.keys().find(|k| !p.contains(k)) {
                return Err(format!("key {} outside partition {}", k.to_hex(), p.id));
            }
        }
        Ok(())
    }

    /// `(index, hex key, version, hex value)` lines sorted by key.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.iter() {
            let value: String = v.value.iter().map(|b| format!("{b:02x}")).collect();
            out.push_str(&format!("{} {} {} {}\n", self.name, k.to_hex(), v.version, value));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::key::{encode_values, Value};
    use proptest::prelude::*;

    fn k(i: i64) -> CompositeKey {
        encode_values(&[Value::Int(i)])
    }

    fn up(_: NodeId) -> bool {
        true
    }

    fn rec(v: &[u8], version: u64) -> VersionedRecord {
        VersionedRecord::new(v.to_vec(), version, 0)
    }

    #[test]
    fn lww_keeps_newer() {
        let mut s = IndexStore::new("t", &[0, 1]);
        let reg = MergeRegistry::with_builtins();
        let lww = WritePolicy::LastWriteWins;
        s.put(k(1), rec(b"b", 5), &lww, &reg, 5, &up).unwrap();
        let out = s.put(k(1), rec(b"a", 3), &lww, &reg, 6, &up).unwrap();
        assert_eq!(out, PutOutcome::Stale { stored: 5 });
        assert_eq!(s.get(&k(1)).unwrap().value, b"b");
    }

    #[test]
    fn unknown_merge_function() {
        let mut s = IndexStore::new("t", &[0]);
        let err = s
            .put(k(1), rec(b"x", 1), &WritePolicy::Merge("nope".into()), &MergeRegistry::empty(), 1, &up)
            .unwrap_err();
        assert_eq!(err, StorageError::UnknownMergeFunction("nope".into()));
    }

    #[test]
    fn serializable_versions_increase_and_conflict() {
        let mut s = IndexStore::new("t", &[0]);
        let reg = MergeRegistry::empty();
        let ser = WritePolicy::Serializable;
        let PutOutcome::Applied { version: v1 } = s.put(k(1), rec(b"a", 10), &ser, &reg, 10, &up).unwrap() else {
            panic!()
        };
        let PutOutcome::Applied { version: v2 } = s.put(k(1), rec(b"b", 4), &ser, &reg, 4, &up).unwrap() else {
            panic!()
        };
        assert!(v2 > v1);
        // two writers read v2; the second one loses
        s.put_if_version(k(1), rec(b"c", 11), Some(v2), 11, &up).unwrap();
        let err = s.put_if_version(k(1), rec(b"d", 11), Some(v2), 11, &up).unwrap_err();
        assert!(matches!(err, StorageError::Conflict { .. }));
    }

    #[test]
    fn serializable_needs_leader() {
        let mut s = IndexStore::new("t", &[0, 1]);
        let down0 = |n: NodeId| n != 0;
        let err = s
            .put(k(1), rec(b"a", 1), &WritePolicy::Serializable, &MergeRegistry::empty(), 1, &down0)
            .unwrap_err();
        assert_eq!(err, StorageError::ReplicaUnavailable(0));
    }

    #[test]
    fn backlog_replays_in_order() {
        let mut s = IndexStore::new("t", &[0, 1]);
        let down1 = |n: NodeId| n != 1;
        s.upsert(k(1), rec(b"a", 1), 100, &down1);
        s.upsert(k(1), rec(b"b", 2), 200, &down1);
        let p = &s.partitions()[0];
        assert_eq!(p.replica(1).unwrap().backlog_len(), 2);
        assert_eq!(p.replica(1).unwrap().oldest_unapplied_commit(), Some(100));
        assert_eq!(p.replica(1).unwrap().applied_seq(s.log_head()), 0);
        assert_eq!(p.replica(0).unwrap().applied_seq(s.log_head()), 2);
        let err = s.get_range(&k(0), None, 10, ReplicaChoice::Node(1), &down1).unwrap_err();
        assert_eq!(err, StorageError::ReplicaUnavailable(0));
        assert_eq!(s.sync(&up), 2);
        let rows = s.get_range(&k(0), None, 10, ReplicaChoice::Node(1), &up).unwrap();
        assert_eq!(rows[0].1.value, b"b");
    }

    #[test]
    fn range_too_wide() {
        let mut s = IndexStore::new("t", &[0]);
        for i in 0..100 {
            s.upsert(k(i), rec(b"x", 1), 1, &up);
        }
        s.split_partition(0, k(25)).unwrap();
        let ids: Vec<_> = s.partitions().iter().map(|p| p.id).collect();
        s.split_partition(ids[1], k(50)).unwrap();
        let ids: Vec<_> = s.partitions().iter().map(|p| p.id).collect();
        s.split_partition(ids[2], k(75)).unwrap();
        assert_eq!(s.partitions().len(), 4);
        let err = s.get_range(&k(0), None, 1000, ReplicaChoice::Primary, &up).unwrap_err();
        assert_eq!(err, StorageError::RangeTooWide { spans: 4, limit: 3 });
        let rows = s.get_range(&k(10), Some(&k(60)), 1000, ReplicaChoice::Primary, &up).unwrap();
        assert_eq!(rows.len(), 50);
    }

    #[test]
    fn split_and_merge_errors() {
        let mut s = IndexStore::new("t", &[0]);
        assert_eq!(s.split_partition(0, CompositeKey::default()), Err(StorageError::InvalidSplitKey(0)));
        let (a, b, _) = s.split_partition(0, k(10)).unwrap();
        assert_eq!(s.split_partition(a, k(20)), Err(StorageError::InvalidSplitKey(a)));
        let (_, c, _) = s.split_partition(b, k(20)).unwrap();
        assert_eq!(s.merge_partitions(a, c), Err(StorageError::NonAdjacent(a, c)));
        s.check_coverage().unwrap();
    }

    #[test]
    fn debug_dump_format() {
        let mut s = IndexStore::new("idx", &[0]);
        s.upsert(k(1), rec(&[0xab], 7), 1, &up);
        assert_eq!(s.debug_dump(), format!("idx {} 7 ab\n", k(1).to_hex()));
    }

    #[test]
    fn replica_add_remove() {
        let mut s = IndexStore::new("t", &[0]);
        s.upsert(k(1), rec(b"abc", 1), 1, &up);
        assert!(s.add_replica(0, 5).unwrap() > 0);
        let rows = s.get_range(&k(0), None, 10, ReplicaChoice::Node(5), &up).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(s.remove_replica(0, 0).unwrap());
        assert_eq!(s.partitions()[0].leader(), Some(5));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Put(i64, u8),
        Del(i64),
        Split(i64),
        Merge(usize),
        Range(i64, i64, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0i64..200, any::<u8>()).prop_map(|(a, b)| Op::Put(a, b)),
            1 => (0i64..200).prop_map(Op::Del),
            1 => (1i64..200).prop_map(Op::Split),
            1 => (0usize..8).prop_map(Op::Merge),
            2 => (0i64..200, 0i64..60, 1usize..80).prop_map(|(a, w, l)| Op::Range(a, a + w, l)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn matches_shadow_map(ops in proptest::collection::vec(op(), 1..120)) {
            let mut s = IndexStore::new("t", &[0, 1]);
            s.max_partitions_per_read = usize::MAX;
            let mut shadow: BTreeMap<i64, u8> = BTreeMap::new();
            let mut version = 0;
            for o in ops {
                match o {
                    Op::Put(key, v) => {
                        version += 1;
                        s.upsert(k(key), rec(&[v], version), version, &up);
                        shadow.insert(key, v);
                    }
                    Op::Del(key) => {
                        let got = s.delete(&k(key), version, &up).map(|r| r.value[0]);
                        prop_assert_eq!(got, shadow.remove(&key));
                    }
                    Op::Split(at) => {
                        let id = s.partition_for(&k(at)).id;
                        let _ = s.split_partition(id, k(at));
                    }
                    Op::Merge(i) => {
                        let ps = s.partitions();
                        if i + 1 < ps.len() {
                            let (a, b) = (ps[i].id, ps[i + 1].id);
                            s.merge_partitions(a, b).unwrap();
                        }
                    }
                    Op::Range(lo, hi, limit) => {
                        let want: Vec<(i64, u8)> =
                            shadow.range(lo..hi).take(limit).map(|(a, b)| (*a, *b)).collect();
                        for choice in [ReplicaChoice::Primary, ReplicaChoice::Node(1)] {
                            let got: Vec<(CompositeKey, u8)> = s
                                .get_range(&k(lo), Some(&k(hi)), limit, choice, &up)
                                .map(|rows| rows.into_iter().map(|(a, b)| (a, b.value[0])).collect())
                                .unwrap_or_default();
                            let want_keys: Vec<(CompositeKey, u8)> =
                                want.iter().map(|(a, b)| (k(*a), *b)).collect();
                            if lo < hi {
                                prop_assert_eq!(got, want_keys);
                            }
                        }
                    }
                }
                prop_assert!(s.check_coverage().is_ok());
            }
        }

        #[test]
        fn lww_order_independent(mut writes in proptest::collection::vec((0u64..20, 0u32..3, any::<u8>()), 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let reg = MergeRegistry::empty();
            let run = |ws: &[(u64, u32, u8)]| {
                let mut s = IndexStore::new("t", &[0]);
                for &(ver, writer, v) in ws {
                    s.put(k(1), VersionedRecord::new(vec![v], ver, writer), &WritePolicy::LastWriteWins, &reg, ver, &up).unwrap();
                }
                s.get(&k(1)).cloned()
            };
            // distinct (version, writer) stamps carry a single value each
            writes.sort_by_key(|w| (w.0, w.1));
            writes.dedup_by_key(|w| (w.0, w.1));
            let a = run(&writes);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            writes.shuffle(&mut rng);
            prop_assert_eq!(a, run(&writes));
        }
    }
}
