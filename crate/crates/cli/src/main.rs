//! `scalestore` command line: admission checks, simulation runs and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 admission rejection, 3 unmet
//! scenario acceptance, 4 internal invariant violation.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scalestore::sim::{self, MetricsLog, Scenario, SimError};
use scalestore::{check_admissible, compile_catalog, parse_template, Schema, DEFAULT_BUDGET};

const USAGE: u8 = 1;
const REJECTED: u8 = 2;
const UNMET: u8 = 3;
const INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(name = "scalestore", version, about = "Scale-independent storage: template checks and load simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check query templates against a schema and print the maintenance table.
    Check {
        /// Schema file.
        schema: PathBuf,
        /// Template files; each may hold several templates separated by `;`.
        #[arg(required = true)]
        templates: Vec<PathBuf>,
        /// Maximum index entries a single write may touch.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
    },
    /// Run a scenario and write its per-tick metrics.
    Simulate {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Metrics CSV destination.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Also write the per-tick maintenance queue trace to this CSV.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Render plots and a summary from a metrics CSV.
    Report {
        /// Metrics CSV produced by `simulate`.
        metrics: PathBuf,
        /// Write each plot and the summary as text files into this directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Plot width in columns.
        #[arg(long, default_value_t = 72)]
        width: usize,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn read(path: &Path) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| fail(USAGE, format_args!("cannot read {}: {e}", path.display())))
}

fn check(schema: &Path, templates: &[PathBuf], budget: u64) -> ExitCode {
    let schema = match read(schema).map(|t| Schema::parse(&t)) {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return fail(USAGE, format_args!("{}: {e}", schema.display())),
        Err(code) => return code,
    };
    let mut parsed = Vec::new();
    for path in templates {
        let text = match read(path) {
            Ok(t) => t,
            Err(code) => return code,
        };
        for t in sim::split_templates(&text) {
            match parse_template(t, &schema) {
                Ok(t) => parsed.push(t),
                Err(e) => return fail(USAGE, format_args!("{}: {e}", path.display())),
            }
        }
    }
    let mut rejected = false;
    for t in &parsed {
        match check_admissible(t, &schema, budget) {
            Ok(report) => {
                let per: Vec<String> = report.fanouts.iter().map(|f| format!("{}={}", f.table, f.fanout)).collect();
                println!("{}: admissible, worst-case fan-out {} ({})", t.name, report.max(), per.join(", "));
            }
            Err(r) => {
                rejected = true;
                println!("{}: REJECTED via relationship `{}` ({r})", t.name, r.relationship);
            }
        }
    }
    if rejected {
        return ExitCode::from(REJECTED);
    }
    match compile_catalog(&parsed, &schema, budget) {
        Ok(catalog) => {
            println!();
            print!("{}", catalog.render_rules());
            ExitCode::SUCCESS
        }
        Err(e) => fail(REJECTED, e),
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    std::fs::write(path, text).map_err(|e| fail(USAGE, format_args!("cannot write {}: {e}", path.display())))
}

fn simulate(path: &Path, out: &Path, trace: Option<&Path>) -> ExitCode {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => return fail(USAGE, e),
    };
    log::info!("running {} ticks", scenario.ticks());
    let output = match sim::run(&scenario) {
        Ok(o) => o,
        Err(e @ SimError::Scenario(_)) => return fail(USAGE, e),
        Err(e @ SimError::Invariant(_)) => return fail(INTERNAL, e),
    };
    if let Err(code) = write(out, &output.log.to_csv()) {
        return code;
    }
    if let Some(p) = trace {
        let mut text = String::from(scalestore::pipeline::TickTrace::HEADER);
        text.push('\n');
        for t in &output.trace {
            text.push_str(&format!("{t}\n"));
        }
        if let Err(code) = write(p, &text) {
            return code;
        }
    }
    println!(
        "latency SLA: p{} <= {} ms",
        scenario.spec.latency_sla.percentile * 100.0,
        scenario.spec.latency_sla.bound_ms
    );
    print!("{}", output.log.summary());
    match scenario.evaluate(&output.log) {
        Some(checks) => {
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(UNMET)
            }
        }
        None => ExitCode::SUCCESS,
    }
}

fn report(path: &Path, out: Option<&Path>, width: usize) -> ExitCode {
    let text = match read(path) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let log = match MetricsLog::from_csv(&text) {
        Ok(l) => l,
        Err(e) => return fail(USAGE, format_args!("{}: {e}", path.display())),
    };
    let plots = plot::all(&log, width.max(8));
    let summary = log.summary().to_string();
    match out {
        Some(dir) => {
            if let Err(e) = std::fs::create_dir_all(dir) {
                return fail(USAGE, format_args!("cannot create {}: {e}", dir.display()));
            }
            for (name, body) in &plots {
                if let Err(code) = write(&dir.join(format!("{name}.txt")), body) {
                    return code;
                }
            }
            if let Err(code) = write(&dir.join("summary.txt"), &summary) {
                return code;
            }
        }
        None => {
            for (_, body) in &plots {
                println!("{body}");
            }
            print!("{summary}");
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCALESTORE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Check {
            schema,
            templates,
            budget,
        } => check(&schema, &templates, budget),
        Command::Simulate { scenario, out, trace } => simulate(&scenario, &out, trace.as_deref()),
        Command::Report { metrics, out, width } => report(&metrics, out.as_deref(), width),
    }
}
