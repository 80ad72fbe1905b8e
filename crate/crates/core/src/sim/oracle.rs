use std::collections::BTreeMap;

use crate::pipeline::{Database, Row};
use crate::query::{CompiledIndex, KeySlot};
use crate::storage::{encode_values, CompositeKey, Value};

/// Recomputes one index from the base tables by nested loops over every
/// combination of rows, ignoring mirrors and maintenance state entirely.
pub fn oracle_index(db: &Database, ci: &CompiledIndex) -> BTreeMap<CompositeKey, Vec<u8>> {
    let t = &ci.template;
    let tables: Vec<Vec<(CompositeKey, &Row)>> = t
        .chain
        .iter()
        .map(|c| {
            let rt = db.rows(&c.table).expect("base table");
            rt.iter().map(|(k, r)| (k.clone(), r)).collect()
        })
        .collect();
    let mut out = BTreeMap::new();
    let mut idx = vec![0usize; tables.len()];
    if tables.iter().any(|rows| rows.is_empty()) {
        return out;
    }
    loop {
        let combo: Vec<&(CompositeKey, &Row)> = idx.iter().enumerate().map(|(p, &i)| &tables[p][i]).collect();
        let field = |pos: usize, f: usize| -> &Value { &combo[pos].1[f] };
        let joined = t
            .joins
            .iter()
            .all(|j| field(j.left.pos, j.left.field) == field(j.right.pos, j.right.field));
        let bound = t.params.iter().all(|p| {
            p.predicates
                .windows(2)
                .all(|w| field(w[0].pos, w[0].field) == field(w[1].pos, w[1].field))
        });
        if joined && bound {
            let mut key = Vec::new();
            for slot in &ci.def.slots {
                let v = match *slot {
                    KeySlot::Param(i) => {
                        let f = t.params[i].predicates[0];
                        field(f.pos, f.field)
                    }
                    KeySlot::Order(f) | KeySlot::Pk(f) => field(f.pos, f.field),
                };
                key.push(v.clone());
            }
            out.insert(encode_values(&key), combo[ci.def.target].0.as_bytes().to_vec());
        }
        // odometer increment
        let mut p = idx.len();
        loop {
            if p == 0 {
                return out;
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < tables[p].len() {
                break;
            }
            idx[p] = 0;
        }
    }
}

/// Oracle contents of every maintained index, keyed by index name.
pub fn oracle_indices(db: &Database) -> BTreeMap<String, BTreeMap<CompositeKey, Vec<u8>>> {
    db.catalog
        .indices
        .iter()
        .filter(|ci| !ci.def.base_table)
        .map(|ci| (ci.def.name.clone(), oracle_index(db, ci)))
        .collect()
}
