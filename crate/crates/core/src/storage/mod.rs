//! Ordered, range-partitioned, replicated key-value substrate.

pub mod key;
pub mod merge;
mod partition;

pub use key::{decode_key, encode_key, encode_values, CompositeKey, FieldKind, KeyError, Value};
pub use merge::MergeRegistry;
pub use partition::{
    IndexStore, NodeId, Partition, PartitionId, PutOutcome, Replica, ReplicaChoice, StorageError,
    VersionedRecord, DEFAULT_MAX_PARTITIONS_PER_READ,
};
