//! Scenario files: the TOML schema describing a topology, its traffic, and
//! what to measure, plus the validation pass that turns one into a runnable
//! description.
//!
//! Validation is strict about anything that would make the run meaningless
//! (unknown names, duplicate wiring, malformed commands) and merely reports
//! what it can't prove: unreachable destinations become warnings, skipped
//! checks become notes, and every defaulted knob is echoed so a run is fully
//! reproducible from its report.

use crate::netdev::{AppSpec, HeaderPolicy};
use crate::packet::{
    parse_ipv4, parse_mac, CustomHeaderDef, DefSet, FieldDef, HeaderLayer, InsertOp,
};
use crate::pipeline::commands::{parse_commands, parse_time};
use crate::pipeline::{
    ArgSource, Command, PipelineConfig, Primitive, Step, TimedCommand,
};
use crate::sim::SimTime;
use crate::switch::{SwitchConfig, NUM_QUEUES};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct LoadError(pub String);

fn fail<T>(msg: impl Into<String>) -> Result<T, LoadError> {
    Err(LoadError(msg.into()))
}

/// "10Mbps", "2.5Gbps", "800Kbps", "1000bps" → bits per second.
pub fn parse_rate_bps(s: &str) -> Result<u64, String> {
    let lower = s.to_ascii_lowercase();
    let (num, mult) = if let Some(n) = lower.strip_suffix("gbps") {
        (n, 1e9)
    } else if let Some(n) = lower.strip_suffix("mbps") {
        (n, 1e6)
    } else if let Some(n) = lower.strip_suffix("kbps") {
        (n, 1e3)
    } else if let Some(n) = lower.strip_suffix("bps") {
        (n, 1.0)
    } else {
        return Err(format!("bad rate {s:?} (expected e.g. 10Mbps, 1Gbps)"));
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("bad rate value {s:?}"))?;
    if !v.is_finite() || v <= 0.0 {
        return Err(format!("rate must be positive: {s:?}"));
    }
    let bps = (v * mult).round();
    if bps < 1.0 || bps > u64::MAX as f64 {
        return Err(format!("rate out of range: {s:?}"));
    }
    Ok(bps as u64)
}

// ---------------------------------------------------------------------------
// Raw TOML schema
// ---------------------------------------------------------------------------

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    duration_s: f64,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    series_interval_ms: Option<u64>,
    #[serde(default, rename = "header")]
    headers: Vec<RawHeader>,
    #[serde(default, rename = "switch")]
    switches: Vec<RawSwitch>,
    #[serde(default, rename = "host")]
    hosts: Vec<RawHost>,
    #[serde(default, rename = "link")]
    links: Vec<RawLink>,
    #[serde(default, rename = "app")]
    apps: Vec<RawApp>,
    #[serde(default, rename = "observe")]
    observe: Vec<RawObserve>,
    #[serde(default, rename = "metric")]
    metrics: Vec<RawMetric>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    name: String,
    layer: String,
    op: String,
    binding: u32,
    #[serde(default)]
    chain_field: Option<String>,
    fields: Vec<RawField>,
    #[serde(default)]
    defaults: BTreeMap<String, u64>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    name: String,
    bits: u32,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitch {
    name: String,
    ports: u32,
    pipeline: String,
    #[serde(default)]
    commands: Option<String>,
    #[serde(default)]
    switch_rate_pps: Option<u64>,
    #[serde(default)]
    input_capacity: Option<usize>,
    #[serde(default)]
    queue_capacity: Option<usize>,
    #[serde(default)]
    default_queue_rate_pps: Option<u64>,
    #[serde(default)]
    max_passes: Option<u32>,
    #[serde(default)]
    hash_seed: Option<RawSeed>,
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum RawSeed {
    Fixed(u32),
    Word(String),
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHost {
    name: String,
    ip: String,
    mac: String,
    #[serde(default)]
    policy: Option<RawPolicy>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    header: String,
    ports: [u16; 2],
    #[serde(rename = "dest")]
    dests: Vec<RawDest>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDest {
    ip: String,
    values: BTreeMap<String, u64>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    a: String,
    b: String,
    bandwidth: String,
    #[serde(default)]
    delay: Option<String>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApp {
    host: String,
    kind: String,
    #[serde(default)]
    dst: Option<String>,
    #[serde(default)]
    rate_pps: Option<u64>,
    #[serde(default)]
    payload: Option<usize>,
    #[serde(default)]
    src_port: Option<u16>,
    #[serde(default)]
    start: Option<String>,
    #[serde(default)]
    stop: Option<String>,
    #[serde(default)]
    on_mean_s: Option<f64>,
    #[serde(default)]
    off_mean_s: Option<f64>,
    #[serde(default)]
    ports: Vec<u16>,
    #[serde(default)]
    port_ranges: Vec<[u16; 2]>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObserve {
    point: String,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    name: String,
    kind: String,
    a: String,
    b: String,
    #[serde(default)]
    value: Option<String>,
}

// ---------------------------------------------------------------------------
// Validated form
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HashSeedSpec {
    Auto,
    Fixed(u32),
}

pub struct SwitchDecl {
    pub name: String,
    pub cfg: SwitchConfig,
    pub hash_seed: HashSeedSpec,
    /// Pipeline as declared; table entries arrive via `commands`.
    pub pipeline: PipelineConfig,
    pub commands: Vec<TimedCommand>,
}

pub struct HostDecl {
    pub name: String,
    pub ip: u64,
    pub mac: u64,
    pub policy: Option<HeaderPolicy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Host(usize),
    SwitchPort { switch: usize, port: u32 },
}

pub struct LinkDecl {
    pub a: Endpoint,
    pub b: Endpoint,
    /// Device names only; the per-direction trace points are
    /// `link:<a_name>-><b_name>` and the reverse.
    pub a_name: String,
    pub b_name: String,
    pub bandwidth_bps: u64,
    pub delay: SimTime,
}

pub struct AppDecl {
    pub host: usize,
    pub spec: AppSpec,
}

pub struct MetricDecl {
    pub name: String,
    pub a: String,
    pub b: String,
    pub use_bytes: bool,
}

/// Everything the loader wants to tell a human, separated by severity.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub defaults_applied: Vec<String>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

pub struct Scenario {
    pub name: String,
    pub duration: SimTime,
    pub seed: u64,
    pub series_interval: SimTime,
    pub defs: DefSet,
    pub switches: Vec<SwitchDecl>,
    pub hosts: Vec<HostDecl>,
    pub links: Vec<LinkDecl>,
    pub apps: Vec<AppDecl>,
    pub observe: Vec<String>,
    pub metrics: Vec<MetricDecl>,
    pub report: LoadReport,
}

impl Scenario {
    /// Loads and validates a scenario file. Pipeline and command paths are
    /// resolved relative to the scenario file's directory.
    pub fn load(path: &Path) -> Result<Scenario, LoadError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LoadError(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Scenario::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Scenario, LoadError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| LoadError(format!("scenario parse: {e}")))?;
        build(raw, base)
    }
}

fn build(raw: RawScenario, base: &Path) -> Result<Scenario, LoadError> {
    let mut report = LoadReport::default();

    if raw.name.trim().is_empty() {
        return fail("scenario name must not be empty");
    }
    if !(raw.duration_s.is_finite() && raw.duration_s > 0.0) {
        return fail("duration_s must be positive");
    }
    let duration = SimTime::from_secs_f64(raw.duration_s);

    let seed = match raw.seed {
        Some(s) => s,
        None => {
            report.defaults_applied.push("seed = 1".into());
            1
        }
    };
    let series_interval = match raw.series_interval_ms {
        Some(0) => return fail("series_interval_ms must be positive"),
        Some(ms) => SimTime::from_millis(ms),
        None => {
            report.defaults_applied.push("series_interval_ms = 100".into());
            SimTime::from_millis(100)
        }
    };

    // Custom header definitions.
    let mut defs = DefSet::new();
    for h in &raw.headers {
        let def = header_def(h)?;
        defs.insert(def)
            .map_err(|e| LoadError(format!("header {}: {e}", h.name)))?;
    }

    // Namespace: switch and host names share one pool, since trace points and
    // link endpoints refer to either.
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for n in raw.switches.iter().map(|s| s.name.as_str()).chain(raw.hosts.iter().map(|h| h.name.as_str())) {
        if n.trim().is_empty() {
            return fail("device names must not be empty");
        }
        if n.contains([':', '/', ' ']) || n.contains("->") {
            return fail(format!("device name {n:?} contains reserved characters"));
        }
        if !names.insert(n) {
            return fail(format!("duplicate device name {n:?}"));
        }
    }

    // Switches: config defaults, pipeline load, command parse + dry run.
    let mut switches = Vec::new();
    for s in &raw.switches {
        switches.push(switch_decl(s, &defs, base, &mut report)?);
    }

    // Hosts.
    let mut hosts = Vec::new();
    let mut ips: BTreeMap<u64, usize> = BTreeMap::new();
    let mut macs: BTreeSet<u64> = BTreeSet::new();
    for (i, h) in raw.hosts.iter().enumerate() {
        let ip = parse_ipv4(&h.ip).map_err(|e| LoadError(format!("host {}: {e}", h.name)))?;
        let mac = parse_mac(&h.mac).map_err(|e| LoadError(format!("host {}: {e}", h.name)))?;
        if ips.insert(ip, i).is_some() {
            return fail(format!("host {}: duplicate ip {}", h.name, h.ip));
        }
        if !macs.insert(mac) {
            return fail(format!("host {}: duplicate mac {}", h.name, h.mac));
        }
        let policy = match &h.policy {
            Some(p) => Some(policy_decl(p, &h.name, &defs)?),
            None => None,
        };
        hosts.push(HostDecl { name: h.name.clone(), ip, mac, policy });
    }

    let switch_idx: BTreeMap<&str, usize> =
        raw.switches.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let host_idx: BTreeMap<&str, usize> =
        raw.hosts.iter().enumerate().map(|(i, h)| (h.name.as_str(), i)).collect();

    // Links.
    let mut links = Vec::new();
    let mut used_ports: BTreeSet<(usize, u32)> = BTreeSet::new();
    let mut host_links: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pairs: BTreeSet<(String, String)> = BTreeSet::new();
    for (li, l) in raw.links.iter().enumerate() {
        let ctx = format!("link {} ({} -- {})", li + 1, l.a, l.b);
        let (a, a_name) = endpoint(&l.a, &switch_idx, &host_idx, &switches, &ctx)?;
        let (b, b_name) = endpoint(&l.b, &switch_idx, &host_idx, &switches, &ctx)?;
        if a_name == b_name {
            return fail(format!("{ctx}: both ends on the same device"));
        }
        for (ep, nm) in [(a, &a_name), (b, &b_name)] {
            match ep {
                Endpoint::SwitchPort { switch, port } => {
                    if !used_ports.insert((switch, port)) {
                        return fail(format!("{ctx}: port {port} of {nm} is already wired"));
                    }
                }
                Endpoint::Host(h) => {
                    if host_links.insert(h, li).is_some() {
                        return fail(format!("{ctx}: host {nm} already has a link"));
                    }
                }
            }
        }
        if !pairs.insert((a_name.clone(), b_name.clone())) || !pairs.insert((b_name.clone(), a_name.clone())) {
            return fail(format!("{ctx}: duplicate link between {a_name} and {b_name}"));
        }
        let bandwidth_bps =
            parse_rate_bps(&l.bandwidth).map_err(|e| LoadError(format!("{ctx}: {e}")))?;
        let delay = match &l.delay {
            Some(d) => parse_time(d).map_err(|e| LoadError(format!("{ctx}: {e}")))?,
            None => {
                report.defaults_applied.push(format!("{ctx}: delay = 1us"));
                SimTime::from_micros(1)
            }
        };
        links.push(LinkDecl { a, b, a_name, b_name, bandwidth_bps, delay });
    }

    for (hi, h) in hosts.iter().enumerate() {
        if !host_links.contains_key(&hi) {
            return fail(format!("host {} has no link", h.name));
        }
    }
    for (si, s) in raw.switches.iter().enumerate() {
        for p in 0..s.ports {
            if !used_ports.contains(&(si, p)) {
                report.notes.push(format!("switch {} port {p} is unwired", s.name));
            }
        }
    }

    // Applications.
    let mut apps = Vec::new();
    for (ai, a) in raw.apps.iter().enumerate() {
        apps.push(app_decl(a, ai, &host_idx, &hosts, duration, &ips, &mut report)?);
    }
    // A host's sinks must be unambiguous.
    for (hi, h) in hosts.iter().enumerate() {
        let mut claimed: BTreeMap<u16, usize> = BTreeMap::new();
        for (ai, a) in apps.iter().enumerate().filter(|(_, a)| a.host == hi) {
            if let AppSpec::Sink { ports, ranges } = &a.spec {
                let mut all: Vec<u16> = ports.clone();
                for &(lo, hi) in ranges {
                    // Ranges can be wide; claim endpoints plus overlap checks
                    // against other claims.
                    all.push(lo);
                    all.push(hi);
                }
                for p in all {
                    if let Some(other) = claimed.insert(p, ai) {
                        if other != ai {
                            return fail(format!(
                                "host {}: sinks {} and {} both claim port {p}",
                                h.name, other, ai
                            ));
                        }
                    }
                }
                for (ai2, a2) in apps.iter().enumerate().filter(|(i, a)| *i != ai && a.host == hi) {
                    if let AppSpec::Sink { ports: p2, ranges: r2 } = &a2.spec {
                        let overlap = ranges.iter().any(|&(lo, hi)| {
                            p2.iter().any(|p| (lo..=hi).contains(p))
                                || r2.iter().any(|&(lo2, hi2)| lo <= hi2 && lo2 <= hi)
                        }) || ports.iter().any(|p| {
                            p2.contains(p) || r2.iter().any(|&(lo2, hi2)| (lo2..=hi2).contains(p))
                        });
                        if overlap && ai < ai2 {
                            return fail(format!(
                                "host {}: sinks {ai} and {ai2} overlap",
                                h.name
                            ));
                        }
                    }
                }
            }
        }
    }

    // Observation points and metrics.
    let mut observe = Vec::new();
    let mut seen_points = BTreeSet::new();
    for o in &raw.observe {
        validate_point(&o.point, &raw, &switches, &links, &apps, &hosts)?;
        if seen_points.insert(o.point.clone()) {
            observe.push(o.point.clone());
        } else {
            report.notes.push(format!("observe point {} listed twice", o.point));
        }
    }
    let mut metrics = Vec::new();
    let mut metric_names = BTreeSet::new();
    for m in &raw.metrics {
        if m.kind != "ratio" {
            return fail(format!("metric {}: unknown kind {:?}", m.name, m.kind));
        }
        if !metric_names.insert(m.name.clone()) {
            return fail(format!("duplicate metric name {}", m.name));
        }
        validate_point(&m.a, &raw, &switches, &links, &apps, &hosts)?;
        validate_point(&m.b, &raw, &switches, &links, &apps, &hosts)?;
        let use_bytes = match m.value.as_deref() {
            None | Some("packets") => false,
            Some("bytes") => true,
            Some(v) => return fail(format!("metric {}: bad value {v:?}", m.name)),
        };
        metrics.push(MetricDecl { name: m.name.clone(), a: m.a.clone(), b: m.b.clone(), use_bytes });
    }

    reachability(&switches, &hosts, &links, &apps, &mut report);

    Ok(Scenario {
        name: raw.name,
        duration,
        seed,
        series_interval,
        defs,
        switches,
        hosts,
        links,
        apps,
        observe,
        metrics,
        report,
    })
}

fn header_def(h: &RawHeader) -> Result<CustomHeaderDef, LoadError> {
    let layer = match h.layer.as_str() {
        "L2" => HeaderLayer::L2,
        "L3" => HeaderLayer::L3,
        "L4" => HeaderLayer::L4,
        other => return fail(format!("header {}: bad layer {other:?} (L2/L3/L4)", h.name)),
    };
    let op = match h.op.as_str() {
        "add_before" => InsertOp::AddBefore,
        "add_after" => InsertOp::AddAfter,
        "replace" => InsertOp::Replace,
        other => {
            return fail(format!(
                "header {}: bad op {other:?} (add_before/add_after/replace)",
                h.name
            ))
        }
    };
    if h.binding > u16::MAX as u32 {
        return fail(format!("header {}: binding exceeds 16 bits", h.name));
    }
    let def = CustomHeaderDef {
        name: h.name.clone(),
        layer,
        op,
        binding: h.binding as u16,
        chain_field: h.chain_field.clone(),
        fields: h
            .fields
            .iter()
            .map(|f| FieldDef { name: f.name.clone(), bits: f.bits })
            .collect(),
        defaults: h.defaults.clone(),
    };
    def.validate()
        .map_err(|e| LoadError(format!("header {}: {e}", h.name)))?;
    Ok(def)
}

fn switch_decl(
    s: &RawSwitch,
    defs: &DefSet,
    base: &Path,
    report: &mut LoadReport,
) -> Result<SwitchDecl, LoadError> {
    if s.ports == 0 {
        return fail(format!("switch {}: needs at least one port", s.name));
    }
    let mut cfg = SwitchConfig::new(s.ports);
    let mut dflt = |what: &str, v: String| {
        report.defaults_applied.push(format!("switch {}: {what} = {v}", s.name));
    };
    match s.switch_rate_pps {
        Some(0) => return fail(format!("switch {}: switch_rate_pps must be positive", s.name)),
        Some(r) => cfg.switch_rate_pps = r,
        None => dflt("switch_rate_pps", cfg.switch_rate_pps.to_string()),
    }
    match s.input_capacity {
        Some(0) => return fail(format!("switch {}: input_capacity must be positive", s.name)),
        Some(c) => cfg.input_capacity = c,
        None => dflt("input_capacity", cfg.input_capacity.to_string()),
    }
    match s.queue_capacity {
        Some(0) => return fail(format!("switch {}: queue_capacity must be positive", s.name)),
        Some(c) => cfg.queue_capacity = c,
        None => dflt("queue_capacity", cfg.queue_capacity.to_string()),
    }
    match s.default_queue_rate_pps {
        Some(0) => {
            return fail(format!("switch {}: default_queue_rate_pps must be positive", s.name))
        }
        Some(r) => cfg.default_queue_rate_pps = r,
        None => dflt("default_queue_rate_pps", cfg.default_queue_rate_pps.to_string()),
    }
    match s.max_passes {
        Some(0) => return fail(format!("switch {}: max_passes must be at least 1", s.name)),
        Some(p) => cfg.max_internal_passes = p,
        None => dflt("max_passes", cfg.max_internal_passes.to_string()),
    }
    let hash_seed = match &s.hash_seed {
        None => {
            dflt("hash_seed", "0".into());
            HashSeedSpec::Fixed(0)
        }
        Some(RawSeed::Fixed(v)) => HashSeedSpec::Fixed(*v),
        Some(RawSeed::Word(w)) if w == "auto" => HashSeedSpec::Auto,
        Some(RawSeed::Word(w)) => {
            return fail(format!("switch {}: hash_seed must be an integer or \"auto\", got {w:?}", s.name))
        }
    };

    let ppath = base.join(&s.pipeline);
    let ptext = std::fs::read_to_string(&ppath).map_err(|e| {
        LoadError(format!("switch {}: cannot read pipeline {}: {e}", s.name, ppath.display()))
    })?;
    let pipeline = PipelineConfig::from_toml(&ptext, defs)
        .map_err(|e| LoadError(format!("switch {}: pipeline {}: {e}", s.name, s.pipeline)))?;

    let mut commands = Vec::new();
    if let Some(cpath) = &s.commands {
        let cfull = base.join(cpath);
        let ctext = std::fs::read_to_string(&cfull).map_err(|e| {
            LoadError(format!("switch {}: cannot read commands {}: {e}", s.name, cfull.display()))
        })?;
        commands = parse_commands(&ctext)
            .map_err(|e| LoadError(format!("switch {}: commands {}: {e}", s.name, cpath)))?;
    }

    // Dry-run the full command sequence in execution order against a scratch
    // copy, so a run can't die mid-flight on a bad entry.
    let mut probe = pipeline.clone();
    let mut ordered: Vec<&TimedCommand> = commands.iter().collect();
    ordered.sort_by_key(|c| c.at.unwrap_or(SimTime::ZERO));
    for tc in ordered {
        let res = match &tc.cmd {
            Command::TableAdd { table, action, keys, params } => {
                probe.table_add(table, action, keys, params.clone()).map_err(|e| e.to_string())
            }
            Command::TableSetDefault { table, action, params } => {
                probe.table_set_default(table, action, params.clone()).map_err(|e| e.to_string())
            }
            Command::SetQueueRate { port, qid, rate_pps } => {
                if *port >= cfg.num_ports {
                    Err(format!("port {port} out of range"))
                } else if *qid as usize >= NUM_QUEUES {
                    Err(format!("queue id {qid} out of range"))
                } else if *rate_pps == 0 {
                    Err("queue rate must be positive".into())
                } else {
                    Ok(())
                }
            }
            Command::SetSwitchRate { rate_pps } => {
                if *rate_pps == 0 {
                    Err("switch rate must be positive".into())
                } else {
                    Ok(())
                }
            }
        };
        res.map_err(|e| {
            LoadError(format!(
                "switch {}: command line {}: {e}",
                s.name, tc.line
            ))
        })?;
    }

    Ok(SwitchDecl { name: s.name.clone(), cfg, hash_seed, pipeline, commands })
}

fn policy_decl(p: &RawPolicy, host: &str, defs: &DefSet) -> Result<HeaderPolicy, LoadError> {
    let def = defs
        .get(&p.header)
        .ok_or_else(|| LoadError(format!("host {host}: policy header {} is not defined", p.header)))?;
    let [lo, hi] = p.ports;
    if lo > hi {
        return fail(format!("host {host}: policy port range {lo}..{hi} is inverted"));
    }
    let chain = def.chain_name().to_string();
    let mut dests = BTreeMap::new();
    for d in &p.dests {
        let ip = parse_ipv4(&d.ip).map_err(|e| LoadError(format!("host {host}: policy: {e}")))?;
        for (fname, v) in &d.values {
            let f = def.field(fname).ok_or_else(|| {
                LoadError(format!("host {host}: policy sets unknown field {}.{fname}", p.header))
            })?;
            if *fname == chain {
                return fail(format!(
                    "host {host}: policy must not set the chaining field {}.{fname}",
                    p.header
                ));
            }
            if !crate::packet::custom::fits(*v, f.bits) {
                return fail(format!(
                    "host {host}: policy value {v:#x} exceeds {} bits of {}.{fname}",
                    f.bits, p.header
                ));
            }
        }
        if dests.insert(ip, d.values.clone()).is_some() {
            return fail(format!("host {host}: policy lists {} twice", d.ip));
        }
    }
    if dests.is_empty() {
        return fail(format!("host {host}: policy has no destinations"));
    }
    Ok(HeaderPolicy { header: p.header.clone(), port_lo: lo, port_hi: hi, dests })
}

fn endpoint(
    spec: &str,
    switch_idx: &BTreeMap<&str, usize>,
    host_idx: &BTreeMap<&str, usize>,
    switches: &[SwitchDecl],
    ctx: &str,
) -> Result<(Endpoint, String), LoadError> {
    match spec.split_once(':') {
        Some((name, port)) => {
            let si = *switch_idx
                .get(name)
                .ok_or_else(|| LoadError(format!("{ctx}: unknown switch {name:?}")))?;
            let port: u32 = port
                .parse()
                .map_err(|_| LoadError(format!("{ctx}: bad port {port:?}")))?;
            if port >= switches[si].cfg.num_ports {
                return fail(format!("{ctx}: switch {name} has no port {port}"));
            }
            Ok((Endpoint::SwitchPort { switch: si, port }, name.to_string()))
        }
        None => match host_idx.get(spec) {
            Some(&hi) => Ok((Endpoint::Host(hi), spec.to_string())),
            None if switch_idx.contains_key(spec) => {
                fail(format!("{ctx}: switch endpoint {spec:?} needs a port (e.g. {spec}:0)"))
            }
            None => fail(format!("{ctx}: unknown device {spec:?}")),
        },
    }
}

fn app_decl(
    a: &RawApp,
    index: usize,
    host_idx: &BTreeMap<&str, usize>,
    hosts: &[HostDecl],
    duration: SimTime,
    ips: &BTreeMap<u64, usize>,
    report: &mut LoadReport,
) -> Result<AppDecl, LoadError> {
    let ctx = format!("app {} on {}", index + 1, a.host);
    let host = *host_idx
        .get(a.host.as_str())
        .ok_or_else(|| LoadError(format!("{ctx}: unknown host")))?;

    if a.kind == "sink" {
        for k in ["dst", "rate_pps", "payload", "start", "stop"] {
            // Sinks take no sender fields; catch copy-paste mistakes.
            let set = match k {
                "dst" => a.dst.is_some(),
                "rate_pps" => a.rate_pps.is_some(),
                "payload" => a.payload.is_some(),
                "start" => a.start.is_some(),
                _ => a.stop.is_some(),
            };
            if set {
                return fail(format!("{ctx}: sink does not take {k}"));
            }
        }
        let mut ranges = Vec::new();
        for r in &a.port_ranges {
            let [lo, hi] = *r;
            if lo > hi {
                return fail(format!("{ctx}: port range {lo}..{hi} is inverted"));
            }
            ranges.push((lo, hi));
        }
        if a.ports.is_empty() && ranges.is_empty() {
            return fail(format!("{ctx}: sink needs ports or port_ranges"));
        }
        return Ok(AppDecl { host, spec: AppSpec::Sink { ports: a.ports.clone(), ranges } });
    }

    if !a.ports.is_empty() || !a.port_ranges.is_empty() {
        return fail(format!("{ctx}: only sinks take ports/port_ranges"));
    }
    let dst = a
        .dst
        .as_deref()
        .ok_or_else(|| LoadError(format!("{ctx}: needs dst = \"ip:port\"")))?;
    let (ip_s, port_s) = dst
        .rsplit_once(':')
        .ok_or_else(|| LoadError(format!("{ctx}: bad dst {dst:?} (expected ip:port)")))?;
    let dst_ip = parse_ipv4(ip_s).map_err(|e| LoadError(format!("{ctx}: {e}")))?;
    let dst_port: u16 = port_s
        .parse()
        .map_err(|_| LoadError(format!("{ctx}: bad dst port {port_s:?}")))?;
    if !ips.contains_key(&dst_ip) {
        return fail(format!("{ctx}: no host owns {ip_s}"));
    }
    if dst_ip == hosts[host].ip {
        report.warnings.push(format!("{ctx}: sends to its own address"));
    }
    let rate_pps = match a.rate_pps {
        Some(0) | None => return fail(format!("{ctx}: needs a positive rate_pps")),
        Some(r) => r,
    };
    let payload = a.payload.unwrap_or_else(|| {
        report.defaults_applied.push(format!("{ctx}: payload = 0"));
        0
    });
    let src_port = a.src_port.unwrap_or_else(|| {
        49152 + (index as u16 % 16384)
    });
    let start = match &a.start {
        Some(t) => parse_time(t).map_err(|e| LoadError(format!("{ctx}: start: {e}")))?,
        None => {
            report.defaults_applied.push(format!("{ctx}: start = 0s"));
            SimTime::ZERO
        }
    };
    let stop = match &a.stop {
        Some(t) => parse_time(t).map_err(|e| LoadError(format!("{ctx}: stop: {e}")))?,
        None => {
            report.defaults_applied.push(format!("{ctx}: stop = duration"));
            duration
        }
    };
    if start >= stop {
        return fail(format!("{ctx}: start must precede stop"));
    }
    if stop > duration {
        report.warnings.push(format!("{ctx}: stop is past the run duration; it is cut short"));
    }

    let spec = match a.kind.as_str() {
        "cbr" => {
            for (k, set) in [("on_mean_s", a.on_mean_s.is_some()), ("off_mean_s", a.off_mean_s.is_some())] {
                if set {
                    return fail(format!("{ctx}: cbr does not take {k}"));
                }
            }
            AppSpec::Cbr { dst_ip, dst_port, src_port, rate_pps, payload, start, stop }
        }
        "onoff" => {
            let on_mean_s = a.on_mean_s.unwrap_or_else(|| {
                report.defaults_applied.push(format!("{ctx}: on_mean_s = 2"));
                2.0
            });
            let off_mean_s = a.off_mean_s.unwrap_or_else(|| {
                report.defaults_applied.push(format!("{ctx}: off_mean_s = 1"));
                1.0
            });
            if !(on_mean_s > 0.0 && off_mean_s > 0.0) {
                return fail(format!("{ctx}: on/off means must be positive"));
            }
            AppSpec::OnOff {
                dst_ip,
                dst_port,
                src_port,
                rate_pps,
                payload,
                start,
                stop,
                on_mean_s,
                off_mean_s,
            }
        }
        other => return fail(format!("{ctx}: unknown kind {other:?} (cbr/onoff/sink)")),
    };
    Ok(AppDecl { host, spec })
}

fn validate_point(
    point: &str,
    raw: &RawScenario,
    switches: &[SwitchDecl],
    links: &[LinkDecl],
    apps: &[AppDecl],
    hosts: &[HostDecl],
) -> Result<(), LoadError> {
    let parts: Vec<&str> = point.split(':').collect();
    let known_switch = |n: &str| switches.iter().position(|s| s.name == n);
    let known_host = |n: &str| hosts.iter().position(|h| h.name == n);
    let ok = match parts.as_slice() {
        ["link", rest] => match rest.split_once("->") {
            Some((a, b)) => links
                .iter()
                .any(|l| (l.a_name == a && l.b_name == b) || (l.a_name == b && l.b_name == a)),
            None => false,
        },
        ["switch", n] => known_switch(n).is_some(),
        ["host", n] => known_host(n).is_some(),
        ["queue", sw, p, q] => match (known_switch(sw), p.strip_prefix('p'), q.strip_prefix('q')) {
            (Some(si), Some(p), Some(q)) => {
                matches!((p.parse::<u32>(), q.parse::<usize>()),
                    (Ok(p), Ok(q)) if p < switches[si].cfg.num_ports && q < NUM_QUEUES)
            }
            _ => false,
        },
        ["sink", h, port] => match (known_host(h), port.parse::<u16>()) {
            (Some(hi), Ok(port)) => {
                let listens = apps.iter().any(|a| {
                    a.host == hi
                        && match &a.spec {
                            AppSpec::Sink { ports, ranges } => {
                                ports.contains(&port)
                                    || ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&port))
                            }
                            _ => false,
                        }
                });
                if !listens {
                    return fail(format!("observe point {point}: no sink listens on that port"));
                }
                true
            }
            _ => false,
        },
        ["table", sw, t] => {
            known_switch(sw).is_some_and(|si| switches[si].pipeline.tables.contains_key(*t))
        }
        _ => false,
    };
    let _ = raw;
    if ok {
        Ok(())
    } else {
        fail(format!("unknown observation point {point:?}"))
    }
}

// ---------------------------------------------------------------------------
// Reachability (informational)
// ---------------------------------------------------------------------------

/// Statically walks each sender's path using the final table state. Only
/// single-table destination routing is decidable; anything fancier gets a
/// note and is skipped. Findings land in the report as warnings.
fn reachability(
    switches: &[SwitchDecl],
    hosts: &[HostDecl],
    links: &[LinkDecl],
    apps: &[AppDecl],
    report: &mut LoadReport,
) {
    // Per-switch: pipeline with all commands applied, as the walk's map.
    let mut finals: Vec<Option<PipelineConfig>> = Vec::new();
    for sd in switches {
        let mut p = sd.pipeline.clone();
        let mut ok = true;
        let mut ordered: Vec<&TimedCommand> = sd.commands.iter().collect();
        ordered.sort_by_key(|c| c.at.unwrap_or(SimTime::ZERO));
        for tc in ordered {
            let r = match &tc.cmd {
                Command::TableAdd { table, action, keys, params } => {
                    p.table_add(table, action, keys, params.clone())
                }
                Command::TableSetDefault { table, action, params } => {
                    p.table_set_default(table, action, params.clone())
                }
                _ => Ok(()),
            };
            if r.is_err() {
                ok = false;
                break;
            }
        }
        finals.push(ok.then_some(p));
    }

    // Where does each link endpoint lead?
    let far_end = |ep: Endpoint| -> Option<Endpoint> {
        links.iter().find_map(|l| {
            if l.a == ep {
                Some(l.b)
            } else if l.b == ep {
                Some(l.a)
            } else {
                None
            }
        })
    };

    for (ai, app) in apps.iter().enumerate() {
        let (dst_ip, dst_port) = match &app.spec {
            AppSpec::Cbr { dst_ip, dst_port, .. } | AppSpec::OnOff { dst_ip, dst_port, .. } => {
                (*dst_ip, *dst_port)
            }
            AppSpec::Sink { .. } => continue,
        };
        let ctx = format!("app {} on {}", ai + 1, hosts[app.host].name);
        let mut at = match far_end(Endpoint::Host(app.host)) {
            Some(ep) => ep,
            None => continue, // load already requires a link
        };
        let mut hops = 0;
        loop {
            hops += 1;
            if hops > 32 {
                report
                    .warnings
                    .push(format!("{ctx}: possible forwarding loop toward {}", fmt_ip(dst_ip)));
                break;
            }
            match at {
                Endpoint::Host(h) => {
                    let dst = &hosts[h];
                    if dst.ip != dst_ip {
                        report.warnings.push(format!(
                            "{ctx}: traffic for {} lands on {} instead",
                            fmt_ip(dst_ip),
                            dst.name
                        ));
                    } else {
                        let listens = apps.iter().any(|a| {
                            a.host == h
                                && matches!(&a.spec, AppSpec::Sink { ports, ranges }
                                    if ports.contains(&dst_port)
                                        || ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&dst_port)))
                        });
                        if !listens {
                            report
                                .warnings
                                .push(format!("{ctx}: {} has no sink on port {dst_port}", dst.name));
                        }
                    }
                    break;
                }
                Endpoint::SwitchPort { switch, .. } => {
                    let Some(p) = &finals[switch] else { break };
                    match static_route(p, dst_ip) {
                        RouteProbe::Port(port) => {
                            match far_end(Endpoint::SwitchPort { switch, port }) {
                                Some(next) => at = next,
                                None => {
                                    report.warnings.push(format!(
                                        "{ctx}: {} forwards {} to unwired port {port}",
                                        switches[switch].name,
                                        fmt_ip(dst_ip)
                                    ));
                                    break;
                                }
                            }
                        }
                        RouteProbe::Dropped => {
                            report.warnings.push(format!(
                                "{ctx}: {} has no route for {}",
                                switches[switch].name,
                                fmt_ip(dst_ip)
                            ));
                            break;
                        }
                        RouteProbe::Undecidable => {
                            report.notes.push(format!(
                                "{ctx}: route check skipped at {} (pipeline is not statically decidable)",
                                switches[switch].name
                            ));
                            break;
                        }
                    }
                }
            }
        }
    }
}

enum RouteProbe {
    Port(u32),
    Dropped,
    Undecidable,
}

/// Decides the egress port for `dst_ip` when the ingress program is a single
/// table keyed exactly on the IPv4 destination.
fn static_route(p: &PipelineConfig, dst_ip: u64) -> RouteProbe {
    let [Step::Apply(tname)] = p.ingress.as_slice() else {
        return RouteProbe::Undecidable;
    };
    let Some(t) = p.tables.get(tname) else {
        return RouteProbe::Undecidable;
    };
    let keyed_on_dst =
        t.key.len() == 1 && t.key[0].header == "ipv4" && t.key[0].field == "dst_addr";
    if !keyed_on_dst {
        return RouteProbe::Undecidable;
    }
    let (call, _hit) = t.lookup(Some(&[dst_ip]));
    let Some(action) = p.actions.get(&call.action) else {
        return RouteProbe::Undecidable;
    };
    for prim in &action.body {
        if let Primitive::SetEgressPort(arg) = prim {
            return match arg {
                ArgSource::Literal(v) => RouteProbe::Port(*v as u32),
                ArgSource::Param(i) => match call.params.get(*i) {
                    Some(v) => RouteProbe::Port(*v as u32),
                    None => RouteProbe::Undecidable,
                },
            };
        }
        if matches!(prim, Primitive::Drop) {
            return RouteProbe::Dropped;
        }
    }
    RouteProbe::Dropped
}

fn fmt_ip(ip: u64) -> String {
    crate::packet::format_ipv4(ip)
}
