//! `pipesim`: run, validate, and generate simulator scenarios.
//!
//! Exit codes: 0 success, 1 bad input (load or validation failure),
//! 2 runtime failure mid-simulation, 3 trace mismatch from `trace-diff`.

use clap::{Args, Parser, Subcommand};
use pipesim::generate::{generate, Template};
use pipesim::net::{run_scenario, RunOptions};
use pipesim::scenario::Scenario;
use pipesim::sim::SimTime;
use pipesim::stats::trace_diff;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pipesim", version, about = "Discrete-event network simulator with programmable match-action switches")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario to completion and print its summary.
    Run(RunArgs),
    /// Load a scenario, report problems, and exit.
    Validate { scenario: PathBuf },
    /// Write a built-in example scenario's files.
    Generate(GenerateArgs),
    /// Compare two trace files; exits 3 at the first differing line.
    TraceDiff { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for summary.txt, series/*.csv, and the trace.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-event trace to <out>/trace.txt (requires --out).
    #[arg(long)]
    trace: bool,
    /// Override the time-series bucket width.
    #[arg(long)]
    series_interval_ms: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// forward, tunnel, or ecmp.
    template: String,
    /// Directory to write the scenario's files into.
    #[arg(long)]
    out: PathBuf,
    /// forward: offered load; ecmp: per-flow rate. Mbit/s of 1250-byte frames.
    #[arg(long, default_value_t = 10)]
    rate_mbps: u64,
    /// ecmp: number of concurrent on/off flows.
    #[arg(long, default_value_t = 1000)]
    flows: u32,
    /// ecmp: desk-scale preset (100 flows at 1 Mbps each).
    #[arg(long)]
    desk: bool,
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run(args) => run(args),
        Cmd::Validate { scenario } => validate(&scenario),
        Cmd::Generate(args) => gen(args),
        Cmd::TraceDiff { a, b } => diff(&a, &b),
    }
}

fn load(path: &PathBuf) -> Result<Scenario, ExitCode> {
    match Scenario::load(path) {
        Ok(s) => Ok(s),
        Err(e) => {
            eprintln!("error: {e}");
            Err(ExitCode::from(1))
        }
    }
}

fn report_load(scn: &Scenario) {
    for w in &scn.report.warnings {
        eprintln!("warning: {w}");
    }
    for n in &scn.report.notes {
        eprintln!("note: {n}");
    }
}

fn run(args: RunArgs) -> ExitCode {
    if args.trace && args.out.is_none() {
        eprintln!("error: --trace needs --out");
        return ExitCode::from(1);
    }
    let scn = match load(&args.scenario) {
        Ok(s) => s,
        Err(c) => return c,
    };
    report_load(&scn);
    let opts = RunOptions {
        seed_override: args.seed,
        series_interval_override: args.series_interval_ms.map(SimTime::from_millis),
        out_dir: args.out,
        trace: args.trace,
        keep_events: false,
    };
    // A mid-run failure (a command rejected at its firing time, an unroutable
    // frame) panics out of the event loop; report it as a runtime error.
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_scenario(&scn, &opts)));
    match result {
        Ok(Ok(out)) => {
            print!("{}", out.summary);
            if out.switches.iter().any(|s| !s.conservation_ok) {
                eprintln!("error: packet conservation violated");
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            eprintln!("runtime error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn validate(path: &PathBuf) -> ExitCode {
    let scn = match load(path) {
        Ok(s) => s,
        Err(c) => return c,
    };
    for d in &scn.report.defaults_applied {
        println!("default: {d}");
    }
    for n in &scn.report.notes {
        println!("note: {n}");
    }
    for w in &scn.report.warnings {
        println!("warning: {w}");
    }
    println!(
        "ok: {} switches, {} hosts, {} links, {} apps",
        scn.switches.len(),
        scn.hosts.len(),
        scn.links.len(),
        scn.apps.len()
    );
    ExitCode::SUCCESS
}

fn gen(args: GenerateArgs) -> ExitCode {
    let (flows, rate_mbps) = if args.desk { (100, 1) } else { (args.flows, args.rate_mbps) };
    let t = match Template::from_name(&args.template, rate_mbps, flows) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match generate(&t, &args.out) {
        Ok(path) => {
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn diff(a: &PathBuf, b: &PathBuf) -> ExitCode {
    match trace_diff(a, b) {
        Ok(None) => {
            println!("identical");
            ExitCode::SUCCESS
        }
        Ok(Some((line, la, lb))) => {
            println!("line {line} differs:");
            println!("  a: {la}");
            println!("  b: {lb}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
