mod common;

use std::collections::BTreeMap;

use common::*;
use scalestore::pipeline::{ReadOutcome, SessionToken};
use scalestore::sim::{oracle_indices, split_templates};
use scalestore::{bind, check_admissible, compile_catalog, parse_template, CompileError, Schema, Value, DEFAULT_BUDGET};

fn toy_graph() -> scalestore::pipeline::Database {
    let mut db = social_db(spec("availability_first.json"), &[0, 1]);
    let mut s = SessionToken::new();
    for line in fixture("toy_graph.csv").lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        match f[0] {
            "profile" => {
                let row = vec![Value::str(f[1]), Value::str(f[2]), Value::date(f[3]).unwrap()];
                db.write("profiles", row, &mut s, 1, &up).unwrap();
            }
            "friends" => {
                for (a, b) in [(f[1], f[2]), (f[2], f[1])] {
                    db.write("friendships", vec![Value::str(a), Value::str(b)], &mut s, 1, &up).unwrap();
                }
            }
            other => panic!("unknown record {other}"),
        }
    }
    db.drain_all(2, &up).unwrap();
    db
}

#[test]
fn birthday_index_matches_hand_enumeration() {
    let db = toy_graph();
    let golden: Vec<String> = fixture("golden/birthday_index.txt")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    let ci = db.catalog.index("birthday_index").unwrap();
    let mut got = Vec::new();
    for u in ["alice", "bob", "carol", "dave", "erin", "frank"] {
        let q = bind(&ci.template, &ci.def, &BTreeMap::from([("user_id".to_string(), Value::str(u))])).unwrap();
        let ReadOutcome::Data { entries, .. } = db.read(&q, &mut SessionToken::new(), 3, 3, &up).unwrap() else {
            panic!("quiescent read must return data");
        };
        for row in db.resolve("birthday_index", &entries) {
            got.push(format!("{u} {} {}", row[0], row[2]));
        }
    }
    assert_eq!(got, golden);
    assert_eq!(incremental(&db), oracle_indices(&db));
}

#[test]
fn empty_tables_give_empty_indices() {
    let db = social_db(spec("availability_first.json"), &[0]);
    assert!(oracle_indices(&db).values().all(|m| m.is_empty()));
    assert!(incremental(&db).values().all(|m| m.is_empty()));
}

#[test]
fn maintenance_table_matches_golden() {
    let db = social_db(spec("availability_first.json"), &[0]);
    assert_eq!(db.catalog.render_rules(), fixture("golden/social_rules.txt"));
}

#[test]
fn unbounded_followers_rejected_naming_relationship() {
    let schema = Schema::parse(&fixture("followers.schema")).unwrap();
    let text = fixture("followers.sql");
    let templates: Vec<_> = split_templates(&text).map(|t| parse_template(t, &schema).unwrap()).collect();
    let r = check_admissible(&templates[0], &schema, DEFAULT_BUDGET).unwrap_err();
    assert_eq!(r.relationship, "follower_posts");
    assert_eq!(r.fanout, None);
    assert!(matches!(compile_catalog(&templates, &schema, DEFAULT_BUDGET), Err(CompileError::Rejected(_))));
}

#[test]
fn friendship_write_reaches_friends_of_friends_bound() {
    let mut db = social_db(spec("availability_first.json"), &[0]);
    let mut s = SessionToken::new();
    let mut link = |db: &mut scalestore::pipeline::Database, a: &str, b: &str| {
        db.write("friendships", vec![Value::str(a), Value::str(b)], &mut s, 1, &up).unwrap();
    };
    for i in 0..4 {
        link(&mut db, "b", &format!("c{i}"));
        link(&mut db, &format!("x{i}"), "a");
    }
    db.drain_all(1, &up).unwrap();
    let before = db.index_entries("friends_of_friends_index");
    link(&mut db, "a", "b");
    db.drain_all(2, &up).unwrap();
    let after = db.index_entries("friends_of_friends_index");
    let added = after.keys().filter(|k| !before.contains_key(*k)).count() as u64;
    let bound = db.catalog.reports.iter().find_map(|r| r.fanout("friendships").filter(|_| r.template == "friends_of_friends_index"));
    assert_eq!(added, 8);
    assert_eq!(bound, Some(8));
}
