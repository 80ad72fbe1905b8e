use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use crate::storage::{CompositeKey, Value};

/// Asynchronous maintenance work for one rule and one changed row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateTask {
    /// Position of the rule in the catalog's maintenance table.
    pub rule: usize,
    /// Structure being maintained (index or mirror).
    pub index: String,
    /// Table or mirror whose row changed.
    pub source: String,
    /// Encoded primary key of the changed row.
    pub key: CompositeKey,
    pub old: Option<Vec<Value>>,
    pub new: Option<Vec<Value>>,
    /// Commit time of the base write that caused this task.
    pub commit_ms: u64,
    pub enqueue_ms: u64,
    pub deadline_ms: u64,
    pub seq: u64,
}

impl UpdateTask {
    /// Deadline implied by the originating write, which may be earlier than
    /// `deadline_ms` for cascaded tasks enqueued late.
    pub fn due_ms(&self, staleness_bound_ms: u64) -> u64 {
        self.commit_ms.saturating_add(staleness_bound_ms)
    }
}

#[derive(Debug)]
struct Entry(UpdateTask);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.deadline_ms, self.0.seq).cmp(&(other.0.deadline_ms, other.0.seq))
    }
}

/// Priority queue of update tasks ordered by (deadline, enqueue sequence).
#[derive(Debug, Default)]
pub struct DeadlineQueue {
    heap: BinaryHeap<Reverse<Entry>>,
    next_seq: u64,
}

impl DeadlineQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stamps the task with the next enqueue sequence and queues it.
    pub fn push(&mut self, mut task: UpdateTask) {
        task.seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry(task)));
    }

    pub fn pop(&mut self) -> Option<UpdateTask> {
        self.heap.pop().map(|Reverse(Entry(t))| t)
    }

    pub fn peek(&self) -> Option<&UpdateTask> {
        self.heap.peek().map(|Reverse(Entry(t))| t)
    }

    pub fn min_deadline(&self) -> Option<u64> {
        self.peek().map(|t| t.deadline_ms)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Tasks in no particular order.
    pub fn iter(&self) -> impl Iterator<Item = &UpdateTask> {
        self.heap.iter().map(|Reverse(Entry(t))| t)
    }
}

/// Default alarm headroom as a fraction of the staleness bound.
pub const DEFAULT_HEADROOM_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagStatus {
    Ok,
    /// Time left before the most urgent deadline; negative once missed.
    AtRisk { headroom_ms: i64 },
}

impl LagStatus {
    pub fn at_risk(&self) -> bool {
        matches!(self, LagStatus::AtRisk { .. })
    }
}

pub fn lag_alarm(queue: &DeadlineQueue, now: u64, staleness_bound_ms: u64, headroom_fraction: f64) -> LagStatus {
    let Some(deadline) = queue.min_deadline() else {
        return LagStatus::Ok;
    };
    let headroom = deadline as i64 - now as i64;
    let threshold = (staleness_bound_ms as f64 * headroom_fraction) as i64;
    if headroom < threshold {
        LagStatus::AtRisk { headroom_ms: headroom }
    } else {
        LagStatus::Ok
    }
}

/// One line of the per-tick trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickTrace {
    pub tick: u64,
    pub queue_depth: usize,
    /// `None` when the queue is empty.
    pub min_headroom_ms: Option<i64>,
    pub tasks_applied: usize,
    pub deadline_misses: usize,
}

impl TickTrace {
    pub const HEADER: &'static str = "tick,queue_depth,min_headroom_ms,tasks_applied,deadline_misses";
}

impl fmt::Display for TickTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let headroom = self.min_headroom_ms.map(|h| h.to_string()).unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{}",
            self.tick, self.queue_depth, headroom, self.tasks_applied, self.deadline_misses
        )
    }
}
