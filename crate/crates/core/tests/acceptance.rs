//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
//! any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalestore::consistency::replicas_for;
use scalestore::pipeline::{Database, DrainReport, ReadOutcome, SessionToken};
use scalestore::sim::{durability_monte_carlo, oracle_index, oracle_indices, run, split_templates, Scenario};
use scalestore::storage::NodeId;
use scalestore::{
    bind, check_admissible, compile_catalog, parse_spec, parse_template, CompositeKey, FieldKind, MergeRegistry,
    Schema, Value, DEFAULT_BUDGET,
};

type Outcome = Result<String, String>;

fn deadlines_ordered(r: &DrainReport) -> bool {
    r.applied.windows(2).all(|w| w[0].deadline_ms <= w[1].deadline_ms)
}

/// Criterion 1: incremental indices equal the oracle after random writes.
fn index_convergence() -> Outcome {
    let start = Instant::now();
    let mut drains = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut db = social_db(spec("availability_first.json"), &[0, 1]);
        let mut s = SessionToken::new();
        for i in 0..1000u64 {
            social_write(&mut db, &mut rng, 12, &mut s, i);
            if rng.gen_ratio(1, 8) {
                let r = db.drain(i, rng.gen_range(1..6), &up).unwrap_or_else(|e| panic!("seed {seed} step {i}: {e}"));
                if !deadlines_ordered(&r) {
                    return Err(format!("seed {seed}: drain popped deadlines out of order"));
                }
                drains += 1;
            }
        }
        db.drain_all(1000, &up).unwrap();
        if incremental(&db) != oracle_indices(&db) {
            return Err(format!("seed {seed}: indices differ from oracle"));
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(30) {
        return Err(format!("took {took:.1?}, limit 30 s"));
    }
    Ok(format!("100 seeds x 1000 writes, {drains} partial drains, all indices equal oracle in {took:.1?}"))
}

/// A random schema of one to three tables joined by bounded relationships,
/// with one or two templates over it.
fn random_catalog(rng: &mut ChaCha8Rng) -> Option<(Schema, Vec<scalestore::QueryTemplate>)> {
    let n = rng.gen_range(1..=3);
    let mut text = String::new();
    let mut fields: Vec<Vec<&str>> = Vec::new();
    for t in 0..n {
        let two_keys = rng.gen_bool(0.4);
        let pk = if two_keys { "k string key, k2 string key" } else { "k string key" };
        text.push_str(&format!("table t{t} ({pk}, a string, b string, v int)\n"));
        let mut f = vec!["k", "a", "b"];
        if two_keys {
            f.push("k2");
        }
        fields.push(f);
    }
    let mut links = BTreeSet::new();
    for r in 0..rng.gen_range(1..=4) {
        let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (f, g) = (*fields[x].choose(rng).unwrap(), *fields[y].choose(rng).unwrap());
        if (x, f) == (y, g) || !links.insert(((x, f), (y, g))) || links.contains(&((y, g), (x, f))) {
            continue;
        }
        text.push_str(&format!("relationship r{r} t{x}.{f} -> t{y}.{g} bound {}\n", rng.gen_range(1..=6)));
    }
    let schema = Schema::parse(&text).ok()?;
    let mut templates = Vec::new();
    for i in 0..rng.gen_range(1..=2) {
        let mut chain = vec![rng.gen_range(0..n)];
        let mut joins = String::new();
        for _ in 0..rng.gen_range(0..=2) {
            let rel = schema.relationships.choose(rng)?;
            let from = (rel.from_table[1..].parse::<usize>().ok()?, rel.from_field.as_str());
            let to = (rel.to_table[1..].parse::<usize>().ok()?, rel.to_field.as_str());
            let (near, far) = if rng.gen_bool(0.5) { (from, to) } else { (to, from) };
            let Some(pos) = chain.iter().position(|&t| t == near.0) else { continue };
            joins.push_str(&format!(
                " JOIN t{} x{} ON x{pos}.{} = x{}.{}",
                far.0,
                chain.len(),
                near.1,
                chain.len(),
                far.1
            ));
            chain.push(far.0);
        }
        let target = rng.gen_range(0..chain.len());
        let param = fields[chain[0]].choose(rng)?;
        let order = if rng.gen_bool(0.5) { format!(" ORDER BY x{target}.v") } else { String::new() };
        let sql = format!(
            "INDEX ix{i} AS SELECT x{target}.* FROM t{} x0{joins} WHERE x0.{param} = <p>{order}",
            chain[0]
        );
        templates.push(parse_template(&sql, &schema).ok()?);
    }
    Some((schema, templates))
}

fn random_value(kind: FieldKind, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        FieldKind::String => Value::str(format!("s{}", rng.gen_range(0..5))),
        FieldKind::Int => Value::Int(rng.gen_range(0..4)),
        FieldKind::Date => Value::Date(rng.gen_range(0..10)),
    }
}

/// Entries present in only one of two maps or with differing values: (removed, added).
fn diff(before: &BTreeMap<CompositeKey, Vec<u8>>, after: &BTreeMap<CompositeKey, Vec<u8>>) -> (u64, u64) {
    let removed = before.iter().filter(|(k, v)| after.get(*k) != Some(v)).count() as u64;
    let added = after.iter().filter(|(k, v)| before.get(*k) != Some(v)).count() as u64;
    (removed, added)
}

/// Criterion 2: reported worst-case fan-out bounds the entries each write touches.
fn admission_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = spec("availability_first.json");
    let (mut schemas, mut writes, mut worst) = (0, 0u64, 0.0f64);
    while schemas < 50 {
        let Some((schema, templates)) = random_catalog(&mut rng) else { continue };
        let Ok(catalog) = compile_catalog(&templates, &schema, DEFAULT_BUDGET) else { continue };
        schemas += 1;
        let mut db = Database::new(schema, catalog, spec.clone(), MergeRegistry::with_builtins(), &[0]);
        let tables: Vec<String> = db.schema.tables.iter().map(|t| t.name.clone()).collect();
        let mut s = SessionToken::new();
        let (mut i, mut done) = (0u64, 0);
        while done < 200 {
            i += 1;
            let table = tables.choose(&mut rng).unwrap().clone();
            let before = incremental(&db);
            if rng.gen_ratio(1, 5) {
                let Some(pk) = keys(&db, &table).choose(&mut rng).cloned() else { continue };
                db.delete(&table, &pk, &mut s, i, &up).unwrap();
            } else {
                let kinds = db.schema.table(&table).unwrap().kinds();
                let row: Vec<Value> = kinds.iter().map(|&k| random_value(k, &mut rng)).collect();
                if !respects_bounds(&db, &table, &row) {
                    continue;
                }
                db.write(&table, row, &mut s, i, &up).unwrap();
            }
            db.drain_all(i, &up).unwrap();
            writes += 1;
            done += 1;
            let after = incremental(&db);
            for (t, report) in templates.iter().zip(&db.catalog.reports) {
                // Lookups served by the base table keep no derived entries.
                let (Some(b), Some(a)) = (before.get(&t.name), after.get(&t.name)) else { continue };
                let (removed, added) = diff(b, a);
                let bound = report.fanout(&table).unwrap_or(0);
                if removed.max(added) > bound {
                    return Err(format!("{}: write to {table} touched {removed}/{added} > bound {bound}", t.name));
                }
                if bound > 0 {
                    worst = worst.max(removed.max(added) as f64 / bound as f64);
                }
            }
        }
        for ci in db.catalog.indices.iter().filter(|ci| !ci.def.base_table) {
            if db.index_entries(&ci.def.name) != oracle_index(&db, ci) {
                return Err(format!("{} diverged from oracle", ci.def.name));
            }
        }
    }
    let schema = Schema::parse(&fixture("followers.schema")).unwrap();
    let text = fixture("followers.sql");
    let t = parse_template(split_templates(&text).next().unwrap(), &schema).unwrap();
    match check_admissible(&t, &schema, DEFAULT_BUDGET) {
        Ok(_) => return Err("unbounded followers template was admitted".into()),
        Err(r) if r.relationship != "follower_posts" => return Err(format!("rejected for {}", r.relationship)),
        Err(_) => {}
    }
    let took = start.elapsed();
    if took > Duration::from_secs(60) {
        return Err(format!("took {took:.1?}, limit 60 s"));
    }
    Ok(format!(
        "{schemas} schemas, {writes} writes within bound (max observed/bound {worst:.2}); followers rejected; {took:.1?}"
    ))
}

fn with_seed(name: &str, seed: u64) -> Scenario {
    let mut s = scenario(name);
    s.file.seed = seed;
    s
}

/// Criterion 3: consistency-first never serves data past the bound;
/// availability-first serves stale data under partition, always flagged.
fn staleness_bound() -> Outcome {
    let (mut flagged, mut checked) = (0, 0);
    for seed in 1..=10 {
        let s = with_seed("partition_consistency", seed);
        let bound = s.spec.staleness_bound_ms;
        for r in run(&s).map_err(|e| e.to_string())?.log.rows {
            if r.staleness_max_ms > bound || r.stale_reads > 0 || r.unflagged_stale > 0 {
                return Err(format!("consistency-first seed {seed} tick {}: staleness {}", r.tick, r.staleness_max_ms));
            }
            checked += r.reads;
        }
        let s = with_seed("partition_availability", seed);
        let log = run(&s).map_err(|e| e.to_string())?.log;
        let stale: u64 = log.rows.iter().map(|r| r.stale_reads).sum();
        let unflagged: u64 = log.rows.iter().map(|r| r.unflagged_stale).sum();
        if stale == 0 || unflagged > 0 {
            return Err(format!("availability-first seed {seed}: {stale} flagged, {unflagged} unflagged"));
        }
        flagged += stale;
    }
    Ok(format!("10 seeds: {checked} consistency-first reads within bound; {flagged} stale reads all flagged"))
}

/// State of an index store after each log position it passed through.
type Snapshot = BTreeMap<CompositeKey, (Vec<u8>, u64)>;

struct History(Vec<(u64, Snapshot)>);

impl History {
    fn record(&mut self, db: &Database, index: &str) {
        let store = db.store(index).unwrap();
        if self.0.last().is_some_and(|(h, _)| *h == store.log_head()) {
            return;
        }
        let state = store.iter().map(|(k, r)| (k.clone(), (r.value.clone(), r.version))).collect();
        self.0.push((store.log_head(), state));
    }

    /// Log positions whose state, cut to the query's range, equals `got`.
    fn matching(&self, q: &scalestore::RangeQuery, got: &BTreeMap<CompositeKey, (Vec<u8>, u64)>) -> Vec<u64> {
        self.0
            .iter()
            .filter(|(_, state)| {
                let cut: BTreeMap<_, _> = state
                    .range(q.low.clone()..)
                    .take_while(|(k, _)| q.high.as_ref().is_none_or(|h| *k < h))
                    .take(q.limit as usize)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                &cut == got
            })
            .map(|(h, _)| *h)
            .collect()
    }
}

/// Criterion 4: randomized traces with lagging replicas never violate
/// read-your-writes or monotonic reads.
fn session_guarantees() -> Outcome {
    let base: serde_json::Value = serde_json::from_str(&fixture("availability_first.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut ryw_checked, mut mr_checked, mut stalled) = (0u64, 0u64, 0u64);
    for trace in 0..10_000u64 {
        let mut doc = base.clone();
        doc["staleness_bound_ms"] = rng.gen_range(5..60).into();
        if rng.gen_bool(0.5) {
            doc["priority"] = serde_json::json!(["read_consistency", "availability", "latency", "durability"]);
        }
        let spec = parse_spec(&doc.to_string(), &MergeRegistry::with_builtins()).unwrap();
        let mut db = social_db(spec, &[0, 1, 2]);
        let indices: Vec<String> = db
            .catalog
            .indices
            .iter()
            .filter(|ci| !ci.def.base_table)
            .map(|ci| ci.def.name.clone())
            .collect();
        let mut history: BTreeMap<String, History> =
            indices.iter().map(|i| (i.clone(), History(Vec::new()))).collect();
        for (i, h) in &mut history {
            h.record(&db, i);
        }
        // writer reads its own writes; reader only reads
        let mut sessions = [SessionToken::new(), SessionToken::new()];
        let mut floor: BTreeMap<(usize, String), u64> = BTreeMap::new();
        let mut now = 0;
        for _ in 0..rng.gen_range(10..40) {
            now += rng.gen_range(1..10);
            let down: Vec<NodeId> = (0..3).filter(|_| rng.gen_ratio(1, 3)).collect();
            let reach = move |n: NodeId| !down.contains(&n);
            match rng.gen_range(0..10) {
                0..=2 => social_write_with(&mut db, &mut rng, 4, &mut sessions[0], now, &reach),
                3 | 4 => {
                    db.drain(now, rng.gen_range(1..4), &reach).unwrap();
                }
                5 => {
                    for s in db.stores_mut() {
                        s.sync(&reach);
                    }
                }
                _ => {
                    let who = rng.gen_range(0..2);
                    let index = indices.choose(&mut rng).unwrap().clone();
                    let ci = db.catalog.index(&index).unwrap();
                    let params = BTreeMap::from([("user_id".to_string(), user(rng.gen_range(0..4)))]);
                    let q = bind(&ci.template, &ci.def, &params).unwrap();
                    let wrote = db
                        .catalog
                        .upstream_tables(&index)
                        .iter()
                        .any(|t| sessions[who].last_write(t).is_some());
                    match db.read(&q, &mut sessions[who], now, now, &reach).unwrap() {
                        ReadOutcome::Data { entries, .. } => {
                            let got: BTreeMap<_, _> = entries
                                .iter()
                                .map(|(k, r)| (k.clone(), (r.value.clone(), r.version)))
                                .collect();
                            if who == 0 && wrote {
                                let expect = oracle_index(&db, ci);
                                let values: BTreeMap<_, _> = got.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect();
                                let want: BTreeMap<_, _> = expect
                                    .range(q.low.clone()..)
                                    .take_while(|(k, _)| q.high.as_ref().is_none_or(|h| *k < h))
                                    .map(|(k, v)| (k.clone(), v.clone()))
                                    .collect();
                                if values != want {
                                    return Err(format!("trace {trace}: read-your-writes violated on {index}"));
                                }
                                ryw_checked += 1;
                            }
                            let lo = floor.entry((who, index.clone())).or_insert(0);
                            match history[&index].matching(&q, &got).into_iter().find(|h| h >= lo) {
                                Some(h) => *lo = h,
                                None => return Err(format!("trace {trace}: monotonic reads violated on {index}")),
                            }
                            mr_checked += 1;
                        }
                        _ => stalled += 1,
                    }
                }
            }
            for (i, h) in &mut history {
                h.record(&db, i);
            }
        }
    }
    Ok(format!(
        "10000 traces: {ryw_checked} own-write reads current, {mr_checked} reads monotonic, {stalled} stalled or failed"
    ))
}

/// Criterion 5: every drain pops deadlines in order. `Database::drain`
/// asserts this inline, so a completed run is a run without violations.
fn deadline_order() -> Outcome {
    let mut ticks = 0;
    for name in ["trivial", "partition_availability", "partition_consistency", "failures", "cost_500"] {
        let s = scenario(name);
        let out = std::panic::catch_unwind(|| run(&s)).map_err(|_| format!("{name}: deadline order violated"))?;
        ticks += out.map_err(|e| e.to_string())?.log.rows.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut db = social_db(spec("availability_first.json"), &[0]);
    let mut s = SessionToken::new();
    let mut pops = 0;
    for i in 0..5000u64 {
        let t = i * 2 + rng.gen_range(0..2);
        social_write(&mut db, &mut rng, 10, &mut s, t);
        let r = db.drain(i * 2, rng.gen_range(0..4), &up).unwrap();
        if !deadlines_ordered(&r) {
            return Err(format!("drain at step {i} out of order"));
        }
        pops += r.applied.len();
    }
    Ok(format!("{ticks} scenario ticks and {pops} checked pops with no out-of-order deadline"))
}

/// Criterion 6: the spike scenario keeps the SLA on the plateau and shrinks afterwards.
fn scale_up_down() -> Outcome {
    let start = Instant::now();
    let s = scenario("spike");
    let log = run(&s).map_err(|e| e.to_string())?.log;
    let checks = s.evaluate(&log).unwrap();
    if let Some(c) = checks.iter().find(|c| !c.passed) {
        return Err(c.to_string());
    }
    let spike = &s.file.workload.spikes[0];
    let ramp = |r: &&scalestore::sim::MetricsRow| {
        let h = r.time_ms as f64 / 3_600_000.0;
        spike.start_h <= h && h < spike.start_h + spike.ramp_h
    };
    let nodes: Vec<u32> = log.rows.iter().filter(ramp).map(|r| r.nodes).collect();
    if nodes.windows(2).any(|w| w[1] < w[0]) {
        return Err("node count fell during the ramp".into());
    }
    let took = start.elapsed();
    if took > Duration::from_secs(120) {
        return Err(format!("took {took:.1?}, limit 120 s"));
    }
    let detail: Vec<String> = checks.iter().map(|c| c.detail.clone()).collect();
    Ok(format!("{}; ramp monotone; {took:.1?}", detail.join("; ")))
}

/// Criterion 7: converged cost per user barely moves with a 10x user count.
fn cost_per_user() -> Outcome {
    let small = run(&scenario("cost_500")).map_err(|e| e.to_string())?.log.summary();
    let large = run(&scenario("cost_5000")).map_err(|e| e.to_string())?.log.summary();
    let (a, b) = (small.converged_cost_per_user, large.converged_cost_per_user);
    let ratio = a.max(b) / a.min(b);
    let detail = format!("500 users {a:.5}, 5000 users {b:.5} node-h per user-h, ratio {ratio:.3}");
    if ratio < 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 8: simulated loss frequency agrees with p^R.
fn durability_model() -> Outcome {
    let p = 0.2;
    let target = spec("availability_first.json").durability_target;
    let r = replicas_for(target, p);
    let mut rng = scalestore::sim::stream(8, 2);
    let est = durability_monte_carlo(p, r, 20_000, &mut rng);
    let detail = format!(
        "p={p}, R={r}: {} losses in {} epochs, observed {:.5} vs predicted {:.5} (se {:.5})",
        est.losses, est.epochs, est.observed, est.predicted, est.std_error
    );
    if est.within_sigmas(3.0) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 9: reruns give byte-identical CSV.
fn determinism() -> Outcome {
    let names = ["trivial", "partition_availability", "failures"];
    for name in names {
        let s = scenario(name);
        let a = run(&s).map_err(|e| e.to_string())?.log.to_csv();
        let b = run(&s).map_err(|e| e.to_string())?.log.to_csv();
        if a != b {
            return Err(format!("{name}: reruns differ"));
        }
    }
    Ok(format!("{} scenarios rerun byte-identical", names.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("index convergence", index_convergence),
        ("admission soundness", admission_soundness),
        ("staleness bound", staleness_bound),
        ("session guarantees", session_guarantees),
        ("deadline order", deadline_order),
        ("scale up and down", scale_up_down),
        ("cost per user", cost_per_user),
        ("durability model", durability_model),
        ("determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
