//! Scale-independent storage: a query compiler that bounds per-query work,
//! a partitioned replicated store, an index maintenance pipeline driven by
//! declarative consistency specs, and a model-based provisioner.

pub mod consistency;
pub mod pipeline;
pub mod provisioner;
pub mod query;
pub mod sim;
pub mod storage;

pub use consistency::{parse_spec, Axis, ConsistencySpec, SessionGuarantee, SpecError, WritePolicy};
pub use query::*;
pub use storage::*;
