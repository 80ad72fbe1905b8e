//! Asynchronous index maintenance and consistency-aware reads.

mod database;
mod queue;
mod rows;

pub use database::{
    entry_key, on_base_write, AppliedTask, Change, Database, DrainReport, PipelineConfig, PipelineError, ReadOutcome,
    SessionToken, WriteOutcome,
};
pub use queue::{lag_alarm, DeadlineQueue, LagStatus, TickTrace, UpdateTask, DEFAULT_HEADROOM_FRACTION};
pub use rows::{Row, RowTable};
