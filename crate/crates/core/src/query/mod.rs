//! Restricted query templates and their compilation to maintained indices.

pub mod compile;
pub mod schema;
pub mod template;

pub use compile::{
    bind, check_admissible, compile, compile_catalog, render_rules, BindError, Catalog, CompileError,
    CompiledIndex, Expansion, FanoutReport, FieldMatch, IndexDefinition, KeyField, KeySlot, MaintenanceRule,
    Mirror, RangeQuery, expansion_order,
    Rejection, DEFAULT_BUDGET, MAX_RANGE_LIMIT,
};
pub use schema::{Cardinality, Field, Relationship, Schema, SchemaError, Table};
pub use template::{parse_template, FieldRef, JoinEdge, Param, QueryTemplate, Selection, TemplateError};
