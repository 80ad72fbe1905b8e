#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scalestore::pipeline::{Database, SessionToken};
use scalestore::sim::{split_templates, Scenario};
use scalestore::storage::NodeId;
use scalestore::{
    compile_catalog, parse_spec, parse_template, Cardinality, CompositeKey, ConsistencySpec, MergeRegistry, Schema,
    Value, DEFAULT_BUDGET,
};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures().join(name)).unwrap()
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(&fixtures().join("scenarios").join(format!("{name}.json"))).unwrap()
}

pub fn up(_: NodeId) -> bool {
    true
}

pub fn spec(name: &str) -> ConsistencySpec {
    parse_spec(&fixture(name), &MergeRegistry::with_builtins()).unwrap()
}

/// A database over the social fixture with the given replica nodes.
pub fn social_db(spec: ConsistencySpec, nodes: &[NodeId]) -> Database {
    let schema = Schema::parse(&fixture("social.schema")).unwrap();
    let text = fixture("social.sql");
    let templates: Vec<_> = split_templates(&text).map(|t| parse_template(t, &schema).unwrap()).collect();
    let catalog = compile_catalog(&templates, &schema, DEFAULT_BUDGET).unwrap();
    Database::new(schema, catalog, spec, MergeRegistry::with_builtins(), nodes)
}

/// Primary keys of rows currently in `table`.
pub fn keys(db: &Database, table: &str) -> Vec<Vec<Value>> {
    let rows = db.rows(table).unwrap();
    let pk = rows.table.primary_key.clone();
    rows.iter().map(|(_, r)| pk.iter().map(|&i| r[i].clone()).collect()).collect()
}

/// Number of rows in `table` whose `field` equals `v`, other than the row keyed `pk`.
fn others_with(db: &Database, table: &str, field: usize, v: &Value, pk: &CompositeKey) -> u64 {
    db.rows(table)
        .unwrap()
        .iter()
        .filter(|(k, r)| *k != pk && &r[field] == v)
        .count() as u64
}

/// Whether writing `row` keeps every declared cardinality bound.
pub fn respects_bounds(db: &Database, table: &str, row: &[Value]) -> bool {
    let t = db.schema.table(table).unwrap();
    let pk = db.rows(table).unwrap().pk_of(row);
    db.schema.relationships.iter().all(|rel| {
        let Cardinality::Bounded(k) = rel.bound else { return true };
        [(&rel.from_table, &rel.from_field), (&rel.to_table, &rel.to_field)]
            .into_iter()
            .filter(|(tb, _)| *tb == table)
            .all(|(_, f)| {
                let i = t.field_index(f).unwrap();
                others_with(db, table, i, &row[i], &pk) < k
            })
    })
}

pub fn user(i: u32) -> Value {
    Value::str(format!("u{i}"))
}

/// One random base write against the social schema: profile upserts,
/// friendship inserts within the bound, and deletes of either.
pub fn social_write(db: &mut Database, rng: &mut ChaCha8Rng, users: u32, session: &mut SessionToken, now: u64) {
    social_write_with(db, rng, users, session, now, &up)
}

pub fn social_write_with(
    db: &mut Database,
    rng: &mut ChaCha8Rng,
    users: u32,
    session: &mut SessionToken,
    now: u64,
    reach: &dyn Fn(NodeId) -> bool,
) {
    match rng.gen_range(0..10) {
        0..=3 => {
            let row = vec![
                user(rng.gen_range(0..users)),
                Value::str(format!("n{}", rng.gen_range(0..5))),
                Value::Date(rng.gen_range(0..40)),
            ];
            db.write("profiles", row, session, now, reach).unwrap();
        }
        4..=7 => {
            let row = vec![user(rng.gen_range(0..users)), user(rng.gen_range(0..users))];
            if respects_bounds(db, "friendships", &row) {
                db.write("friendships", row, session, now, reach).unwrap();
            }
        }
        8 => {
            if let Some(pk) = keys(db, "friendships").choose(rng) {
                db.delete("friendships", pk, session, now, reach).unwrap();
            }
        }
        _ => {
            if let Some(pk) = keys(db, "profiles").choose(rng) {
                db.delete("profiles", pk, session, now, reach).unwrap();
            }
        }
    }
}

/// Incrementally maintained contents of every derived index.
pub fn incremental(db: &Database) -> BTreeMap<String, BTreeMap<CompositeKey, Vec<u8>>> {
    db.catalog
        .indices
        .iter()
        .filter(|ci| !ci.def.base_table)
        .map(|ci| (ci.def.name.clone(), db.index_entries(&ci.def.name)))
        .collect()
}
