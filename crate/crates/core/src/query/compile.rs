//! Admission control, index layout, and maintenance-table generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use super::schema::{Cardinality, Schema};
use super::template::{FieldRef, JoinEdge, QueryTemplate};
use crate::storage::key::{CompositeKey, FieldKind, Value};

/// Default global fan-out budget.
pub const DEFAULT_BUDGET: u64 = 10_000;
/// Ceiling on entries returned by one range read.
pub const MAX_RANGE_LIMIT: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFanout {
    pub table: String,
    pub fanout: u64,
}

/// Worst-case number of index entries a single write to each base table can
/// affect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FanoutReport {
    pub template: String,
    pub fanouts: Vec<SourceFanout>,
}

impl FanoutReport {
    pub fn fanout(&self, table: &str) -> Option<u64> {
        self.fanouts.iter().find(|f| f.table == table).map(|f| f.fanout)
    }

    pub fn max(&self) -> u64 {
        self.fanouts.iter().map(|f| f.fanout).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("template `{template}` rejected: relationship `{relationship}` gives fan-out {} over budget {budget}", .fanout.map_or("unbounded".to_string(), |f| f.to_string()))]
pub struct Rejection {
    pub template: String,
    pub relationship: String,
    /// `None` when the chain crosses an unbounded relationship.
    pub fanout: Option<u64>,
    pub budget: u64,
}

fn edge_bound(e: &JoinEdge) -> Option<u64> {
    match e.bound {
        Cardinality::Bounded(k) => Some(k),
        Cardinality::Unbounded => None,
    }
}

/// Product of the join bounds; entries containing a given row at one position.
fn path_product(t: &QueryTemplate) -> Option<u64> {
    t.joins
        .iter()
        .try_fold(1u64, |acc, e| edge_bound(e).map(|k| acc.saturating_mul(k)))
}

/// Checks the constant-work requirement for `template`.
pub fn check_admissible(
    template: &QueryTemplate,
    _schema: &Schema,
    budget: u64,
) -> Result<FanoutReport, Rejection> {
    if let Some(e) = template.joins.iter().find(|e| e.bound == Cardinality::Unbounded) {
        return Err(Rejection {
            template: template.name.clone(),
            relationship: e.relationship.clone(),
            fanout: None,
            budget,
        });
    }
    let per_position = path_product(template).expect("bounded chain");
    let mut fanouts: Vec<SourceFanout> = Vec::new();
    for c in &template.chain {
        if fanouts.iter().any(|f| f.table == c.table) {
            continue;
        }
        let occurrences = template.chain.iter().filter(|o| o.table == c.table).count() as u64;
        fanouts.push(SourceFanout {
            table: c.table.clone(),
            fanout: occurrences.saturating_mul(per_position),
        });
    }
    let report = FanoutReport {
        template: template.name.clone(),
        fanouts,
    };
    if report.max() > budget {
        let worst = template
            .joins
            .iter()
            .max_by_key(|e| (edge_bound(e), std::cmp::Reverse(e.right.pos)))
            .map(|e| e.relationship.clone())
            .unwrap_or_default();
        return Err(Rejection {
            template: template.name.clone(),
            relationship: worst,
            fanout: Some(report.max()),
            budget,
        });
    }
    Ok(report)
}

/// One step of path enumeration outward from a fixed chain position:
/// look up rows at `to.pos` whose `to.field` equals the `from` field value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expansion {
    pub from: FieldRef,
    pub to: FieldRef,
    pub bound: u64,
}

/// Breadth-first expansion order over the join tree starting at `start`.
pub fn expansion_order(t: &QueryTemplate, start: usize) -> Vec<Expansion> {
    let mut known = vec![false; t.chain.len()];
    known[start] = true;
    let mut frontier = vec![start];
    let mut order = Vec::new();
    while let Some(pos) = frontier.first().copied() {
        frontier.remove(0);
        for (near, far, e) in t.neighbours(pos) {
            if known[far.pos] {
                continue;
            }
            known[far.pos] = true;
            order.push(Expansion {
                from: near,
                to: far,
                bound: edge_bound(e).unwrap_or(u64::MAX),
            });
            frontier.push(far.pos);
        }
    }
    order
}

/// Lookups needed to enumerate every path through a row at `start`.
pub fn enumeration_lookups(t: &QueryTemplate, start: usize) -> u64 {
    let mut partial = 1u64;
    let mut lookups = 0u64;
    for step in expansion_order(t, start) {
        lookups = lookups.saturating_add(partial);
        partial = partial.saturating_mul(step.bound);
    }
    lookups
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyField {
    pub label: String,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySlot {
    /// Value of the template parameter with this index.
    Param(usize),
    Order(FieldRef),
    /// Primary-key field of the row at a chain position.
    Pk(FieldRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexDefinition {
    pub name: String,
    pub key_fields: Vec<KeyField>,
    pub slots: Vec<KeySlot>,
    /// Chain position of the referenced record.
    pub target: usize,
    /// True when the base table itself serves the template.
    pub base_table: bool,
    pub source_templates: Vec<String>,
}

impl IndexDefinition {
    pub fn kinds(&self) -> Vec<FieldKind> {
        self.key_fields.iter().map(|k| k.kind).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum FieldMatch {
    Any,
    Fields(Vec<String>),
}

impl fmt::Display for FieldMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldMatch::Any => f.write_str("*"),
            FieldMatch::Fields(fs) => f.write_str(&fs.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaintenanceRule {
    pub index: String,
    pub table: String,
    pub fields: FieldMatch,
    pub update_fn: String,
    pub op_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error(transparent)]
    Rejected(#[from] Rejection),
    #[error("index name `{0}` is defined twice")]
    NameClash(String),
}

/// Whether the template is a point lookup on the full primary key of a single table.
fn served_by_base_table(t: &QueryTemplate, schema: &Schema) -> bool {
    if t.chain.len() != 1 || t.order_by.is_some() {
        return false;
    }
    let table = schema.table(&t.chain[0].table).expect("resolved table");
    let mut fields: Vec<usize> = Vec::new();
    for p in &t.params {
        if p.predicates.len() != 1 {
            return false;
        }
        fields.push(p.predicates[0].field);
    }
    let mut pk = table.primary_key.clone();
    fields.sort_unstable();
    pk.sort_unstable();
    fields == pk
}

/// Chain position sources after self-joins are redirected through mirrors.
pub fn mirror_name(t: &QueryTemplate, table: &str) -> String {
    let repeated = t.repeated_tables();
    match (&t.via, repeated.first()) {
        (Some(via), Some(first)) if *first == table => via.clone(),
        _ => format!("{table}_mirror"),
    }
}

pub fn chain_sources(t: &QueryTemplate) -> Vec<String> {
    let repeated = t.repeated_tables();
    t.chain
        .iter()
        .map(|c| {
            if repeated.contains(&c.table.as_str()) {
                mirror_name(t, &c.table)
            } else {
                c.table.clone()
            }
        })
        .collect()
}

fn index_layout(t: &QueryTemplate, schema: &Schema) -> IndexDefinition {
    let table_of = |pos: usize| schema.table(&t.chain[pos].table).expect("resolved table");
    let label = |f: FieldRef| format!("{}.{}", t.chain[f.pos].alias, table_of(f.pos).fields[f.field].name);
    let kind = |f: FieldRef| table_of(f.pos).fields[f.field].kind;

    if served_by_base_table(t, schema) {
        let table = table_of(0);
        let slots: Vec<KeySlot> = table
            .primary_key
            .iter()
            .map(|&field| KeySlot::Pk(FieldRef { pos: 0, field }))
            .collect();
        let key_fields = slots
            .iter()
            .map(|s| match s {
                KeySlot::Pk(f) => KeyField { label: label(*f), kind: kind(*f) },
                _ => unreachable!(),
            })
            .collect();
        return IndexDefinition {
            name: table.name.clone(),
            key_fields,
            slots,
            target: 0,
            base_table: true,
            source_templates: vec![t.name.clone()],
        };
    }

    let mut slots = Vec::new();
    let mut key_fields = Vec::new();
    for (i, p) in t.params.iter().enumerate() {
        slots.push(KeySlot::Param(i));
        key_fields.push(KeyField {
            label: format!("<{}>", p.name),
            kind: p.kind,
        });
    }
    if let Some(o) = t.order_by {
        slots.push(KeySlot::Order(o));
        key_fields.push(KeyField { label: label(o), kind: kind(o) });
    }
    for pos in 0..t.chain.len() {
        for &field in &table_of(pos).primary_key {
            let f = FieldRef { pos, field };
            slots.push(KeySlot::Pk(f));
            key_fields.push(KeyField { label: label(f), kind: kind(f) });
        }
    }
    IndexDefinition {
        name: t.name.clone(),
        key_fields,
        slots,
        target: t.target(),
        base_table: false,
        source_templates: vec![t.name.clone()],
    }
}

/// Non-key fields of `positions` whose change can alter index contents.
fn relevant_fields(t: &QueryTemplate, schema: &Schema, positions: &[usize]) -> FieldMatch {
    let table = schema.table(&t.chain[positions[0]].table).expect("resolved table");
    let mut fields = BTreeSet::new();
    for &pos in positions {
        for (near, _, _) in t.neighbours(pos) {
            fields.insert(near.field);
        }
        for p in &t.params {
            fields.extend(p.predicates.iter().filter(|f| f.pos == pos).map(|f| f.field));
        }
        if let Some(o) = t.order_by.filter(|o| o.pos == pos) {
            fields.insert(o.field);
        }
    }
    let names: Vec<String> = fields
        .into_iter()
        .filter(|&f| !table.is_pk_field(f))
        .map(|f| table.fields[f].name.clone())
        .collect();
    if names.is_empty() {
        FieldMatch::Any
    } else {
        FieldMatch::Fields(names)
    }
}

/// Rule op budget: fetch + lineage lookup + enumeration lookups + deletes + inserts.
fn refresh_budget(t: &QueryTemplate, positions: &[usize]) -> u64 {
    let per_position = path_product(t).unwrap_or(u64::MAX);
    let entries = (positions.len() as u64).saturating_mul(per_position);
    let lookups: u64 = positions.iter().map(|&p| enumeration_lookups(t, p)).sum();
    2u64.saturating_add(lookups)
        .saturating_add(entries.saturating_mul(2))
}

/// Ops for copying one row into a mirror: fetch and write.
pub const MIRROR_OP_BUDGET: u64 = 2;

/// Compiles one admissible template to its index and maintenance rules.
pub fn compile(template: &QueryTemplate, schema: &Schema) -> (IndexDefinition, Vec<MaintenanceRule>) {
    let def = index_layout(template, schema);
    if def.base_table {
        return (def, Vec::new());
    }
    let mut rules = Vec::new();
    let sources = chain_sources(template);
    for table in template.repeated_tables() {
        let name = mirror_name(template, table);
        rules.push(MaintenanceRule {
            index: name,
            table: table.to_string(),
            fields: FieldMatch::Any,
            update_fn: format!("mirror_{table}"),
            op_budget: MIRROR_OP_BUDGET,
        });
    }
    let mut seen: Vec<&str> = Vec::new();
    for src in &sources {
        if seen.contains(&src.as_str()) {
            continue;
        }
        seen.push(src);
        let positions: Vec<usize> = (0..sources.len()).filter(|&i| &sources[i] == src).collect();
        let is_mirror = src != &template.chain[positions[0]].table;
        let fields = if is_mirror {
            FieldMatch::Any
        } else {
            relevant_fields(template, schema, &positions)
        };
        rules.push(MaintenanceRule {
            index: def.name.clone(),
            table: src.clone(),
            fields,
            update_fn: format!("refresh_{}_from_{}", def.name, src),
            op_budget: refresh_budget(template, &positions),
        });
    }
    (def, rules)
}

/// A compiled template ready for execution.
#[derive(Debug, Clone)]
pub struct CompiledIndex {
    pub def: IndexDefinition,
    pub template: QueryTemplate,
    /// Table or mirror read at each chain position during maintenance.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mirror {
    pub name: String,
    pub table: String,
}

/// Every index plus the combined maintenance table for a set of templates.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub indices: Vec<CompiledIndex>,
    pub mirrors: Vec<Mirror>,
    pub rules: Vec<MaintenanceRule>,
    pub reports: Vec<FanoutReport>,
}

impl Catalog {
    pub fn index(&self, name: &str) -> Option<&CompiledIndex> {
        self.indices.iter().find(|i| i.def.name == name)
    }

    pub fn mirror(&self, name: &str) -> Option<&Mirror> {
        self.mirrors.iter().find(|m| m.name == name)
    }

    pub fn template(&self, name: &str) -> Option<&CompiledIndex> {
        self.indices.iter().find(|i| i.template.name == name)
    }

    /// Base tables whose writes eventually reach `index`, following cascades.
    pub fn upstream_tables(&self, index: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![index.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n.clone()) {
                continue;
            }
            if let Some(ci) = self.index(&n).filter(|ci| ci.def.base_table) {
                out.insert(ci.template.chain[0].table.clone());
            }
            for r in self.rules.iter().filter(|r| r.index == n) {
                if self.is_derived(&r.table) {
                    stack.push(r.table.clone());
                } else {
                    out.insert(r.table.clone());
                }
            }
        }
        out
    }

    /// Derived structures (indices and mirrors) that `name` feeds, transitively, plus itself.
    pub fn upstream_structures(&self, index: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![index.to_string()];
        while let Some(n) = stack.pop() {
            if !out.insert(n.clone()) {
                continue;
            }
            for r in self.rules.iter().filter(|r| r.index == n) {
                if self.is_derived(&r.table) {
                    stack.push(r.table.clone());
                }
            }
        }
        out
    }

    pub fn is_derived(&self, name: &str) -> bool {
        self.mirror(name).is_some() || self.indices.iter().any(|i| !i.def.base_table && i.def.name == name)
    }

    /// Renders the maintenance table with aligned `Index / Table / Field` columns.
    pub fn render_rules(&self) -> String {
        render_rules(&self.rules)
    }
}

pub fn render_rules(rules: &[MaintenanceRule]) -> String {
    let rows: Vec<[String; 3]> = rules
        .iter()
        .map(|r| [r.index.clone(), r.table.clone(), r.fields.to_string()])
        .collect();
    let header = ["Index", "Table", "Field"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 3]| {
        let _ = writeln!(
            out,
            "{:<w0$}  {:<w1$}  {}",
            cells[0],
            cells[1],
            cells[2],
            w0 = widths[0],
            w1 = widths[1]
        );
    };
    line(&mut out, header);
    for row in &rows {
        line(&mut out, [&row[0], &row[1], &row[2]]);
    }
    out
}

/// Checks and compiles a set of templates into one catalog.
pub fn compile_catalog(
    templates: &[QueryTemplate],
    schema: &Schema,
    budget: u64,
) -> Result<Catalog, CompileError> {
    let mut catalog = Catalog {
        indices: Vec::new(),
        mirrors: Vec::new(),
        rules: Vec::new(),
        reports: Vec::new(),
    };
    for t in templates {
        catalog.reports.push(check_admissible(t, schema, budget)?);
        let (def, rules) = compile(t, schema);
        if catalog.indices.iter().any(|i| i.def.name == def.name) {
            if def.base_table {
                // several point lookups on one table share it
                let existing = catalog.indices.iter_mut().find(|i| i.def.name == def.name).unwrap();
                existing.def.source_templates.push(t.name.clone());
                continue;
            }
            return Err(CompileError::NameClash(def.name));
        }
        for table in t.repeated_tables() {
            let name = mirror_name(t, table);
            match catalog.mirrors.iter().find(|m| m.name == name) {
                Some(m) if m.table == table => {}
                Some(_) => return Err(CompileError::NameClash(name)),
                None => catalog.mirrors.push(Mirror {
                    name,
                    table: table.to_string(),
                }),
            }
        }
        for r in rules {
            match catalog.rules.iter_mut().find(|e| e.index == r.index && e.table == r.table) {
                Some(e) if e.update_fn == r.update_fn => {}
                // a mirror that shares its name with an index: one task does both
                Some(e) => {
                    e.op_budget = e.op_budget.saturating_add(r.op_budget);
                    e.fields = match (&e.fields, r.fields) {
                        (FieldMatch::Fields(a), FieldMatch::Fields(b)) => {
                            let mut all: Vec<String> = a.iter().cloned().chain(b).collect();
                            all.sort();
                            all.dedup();
                            FieldMatch::Fields(all)
                        }
                        _ => FieldMatch::Any,
                    };
                    e.update_fn = format!("{}+{}", e.update_fn, r.update_fn);
                }
                None => catalog.rules.push(r),
            }
        }
        catalog.indices.push(CompiledIndex {
            sources: chain_sources(t),
            def,
            template: t.clone(),
        });
    }
    // A mirror may share its name with a single-table index over the same table.
    for m in &catalog.mirrors {
        if let Some(ci) = catalog.index(&m.name) {
            let compatible = ci.template.chain.len() == 1 && ci.template.chain[0].table == m.table;
            if !compatible || ci.def.base_table {
                return Err(CompileError::NameClash(m.name.clone()));
            }
        }
    }
    Ok(catalog)
}

/// One contiguous range read on one index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeQuery {
    pub index: String,
    pub low: CompositeKey,
    /// Exclusive; `None` is the end of the key space.
    pub high: Option<CompositeKey>,
    pub limit: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindError {
    #[error("missing parameter <{0}>")]
    MissingParameter(String),
    #[error("parameter <{param}> expects {expected}, got {actual}")]
    TypeMismatch {
        param: String,
        expected: &'static str,
        actual: &'static str,
    },
}

/// Binds parameter values, producing the range read that answers the query.
pub fn bind(
    template: &QueryTemplate,
    def: &IndexDefinition,
    params: &BTreeMap<String, Value>,
) -> Result<RangeQuery, BindError> {
    let mut values = Vec::with_capacity(template.params.len());
    for p in &template.params {
        let v = params
            .get(&p.name)
            .ok_or_else(|| BindError::MissingParameter(p.name.clone()))?;
        if v.kind() != p.kind {
            return Err(BindError::TypeMismatch {
                param: p.name.clone(),
                expected: p.kind.name(),
                actual: v.kind().name(),
            });
        }
        values.push(v.clone());
    }
    let mut prefix = Vec::new();
    for slot in &def.slots {
        let v = match slot {
            KeySlot::Param(i) => values[*i].clone(),
            KeySlot::Pk(f) | KeySlot::Order(f) => {
                match template.params.iter().position(|p| p.predicates.contains(f)) {
                    Some(i) => values[i].clone(),
                    None => break,
                }
            }
        };
        prefix.push(v);
    }
    let low = crate::storage::key::encode_values(&prefix);
    let high = low.prefix_successor();
    Ok(RangeQuery {
        index: def.name.clone(),
        low,
        high,
        limit: template.limit.unwrap_or(MAX_RANGE_LIMIT).min(MAX_RANGE_LIMIT),
    })
}
