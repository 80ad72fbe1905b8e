use std::collections::{BTreeMap, BTreeSet};

use crate::query::Table;
use crate::storage::{encode_values, CompositeKey, Value};

pub type Row = Vec<Value>;

/// In-memory rows of a table or mirror with an equality access path per field.
#[derive(Debug, Clone)]
pub struct RowTable {
    pub table: Table,
    rows: BTreeMap<CompositeKey, Row>,
    by_field: Vec<BTreeMap<Value, BTreeSet<CompositeKey>>>,
}

impl RowTable {
    pub fn new(table: Table) -> Self {
        let by_field = vec![BTreeMap::new(); table.fields.len()];
        RowTable {
            table,
            rows: BTreeMap::new(),
            by_field,
        }
    }

    pub fn pk_of(&self, row: &[Value]) -> CompositeKey {
        let pk: Vec<Value> = self.table.primary_key.iter().map(|&i| row[i].clone()).collect();
        encode_values(&pk)
    }

    pub fn get(&self, pk: &CompositeKey) -> Option<&Row> {
        self.rows.get(pk)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CompositeKey, &Row)> {
        self.rows.iter()
    }

    /// Rows whose `field` equals `value`.
    pub fn lookup(&self, field: usize, value: &Value) -> impl Iterator<Item = (&CompositeKey, &Row)> {
        self.by_field[field]
            .get(value)
            .into_iter()
            .flatten()
            .map(|pk| (pk, &self.rows[pk]))
    }

    /// Replaces or removes the row at `pk`, returning the previous row.
    pub fn set(&mut self, pk: CompositeKey, row: Option<Row>) -> Option<Row> {
        let old = match &row {
            Some(r) => self.rows.insert(pk.clone(), r.clone()),
            None => self.rows.remove(&pk),
        };
        if let Some(o) = &old {
            for (f, v) in o.iter().enumerate() {
                if let Some(set) = self.by_field[f].get_mut(v) {
                    set.remove(&pk);
                    if set.is_empty() {
                        self.by_field[f].remove(v);
                    }
                }
            }
        }
        if let Some(r) = row {
            for (f, v) in r.into_iter().enumerate() {
                self.by_field[f].entry(v).or_default().insert(pk.clone());
            }
        }
        old
    }
}
