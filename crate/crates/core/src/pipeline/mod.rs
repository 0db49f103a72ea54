//! Match-action tables, action programs, and the two processing stages a
//! switch runs around its queue buffer.
//!
//! A pipeline is declared in a TOML file: the custom headers it parses, named
//! actions (parameter list plus a body of primitive invocations), tables
//! (match kind, key fields, permitted actions), and the ingress/egress control
//! order. Table entries arrive separately through flow commands (see
//! [`commands`]).

pub mod commands;
pub mod hash;

pub use commands::{parse_commands, Command, TimedCommand};

use crate::packet::{
    insert_custom_view, standard_field_bits, strip_custom_view, DefSet, PacketMeta, PacketView,
};
use hash::five_tuple_hash;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("pipeline config: {0}")]
    Config(String),
    #[error("{0}")]
    Entry(String),
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError::Config(msg.into()))
}

/// `header.field` reference; `meta.<name>` addresses packet metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldRef {
    pub header: String,
    pub field: String,
}

impl FieldRef {
    pub fn parse(s: &str) -> Result<FieldRef, String> {
        match s.split_once('.') {
            Some((h, f)) if !h.is_empty() && !f.is_empty() && !f.contains('.') => Ok(FieldRef {
                header: h.to_string(),
                field: f.to_string(),
            }),
            _ => Err(format!("bad field reference `{s}` (expected header.field)")),
        }
    }

    fn is_meta(&self) -> bool {
        self.header == "meta"
    }
}

/// Well-known metadata fields are read-only; any other `meta.*` name is a
/// writable 64-bit scratch slot (per-packet, carried across the queue).
fn meta_read_only(field: &str) -> bool {
    matches!(
        field,
        "instance_type"
            | "ingress_port"
            | "priority"
            | "ingress_global_timestamp"
            | "enq_timestamp"
            | "deq_timedelta"
            | "egress_global_timestamp"
    )
}

fn meta_field_bits(field: &str) -> u32 {
    match field {
        "instance_type" => 8,
        "ingress_port" => 32,
        "priority" => 8,
        _ => 64,
    }
}

/// Bit width of any addressable field, resolving custom headers through `defs`.
fn field_bits(fr: &FieldRef, defs: &DefSet) -> Result<u32, String> {
    if fr.is_meta() {
        return Ok(meta_field_bits(&fr.field));
    }
    if let Some(w) = standard_field_bits(&fr.header, &fr.field) {
        return Ok(w);
    }
    if let Some(def) = defs.get(&fr.header) {
        if let Some(f) = def.field(&fr.field) {
            return Ok(f.bits);
        }
        return Err(format!("header {} has no field {}", fr.header, fr.field));
    }
    Err(format!("unknown field {}.{}", fr.header, fr.field))
}

fn value_fits(value: u64, bits: u32) -> bool {
    bits >= 64 || value < (1u64 << bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchKind {
    Exact,
    Lpm,
}

/// Key literal as written in a flow command: a plain value or an LPM prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeyLiteral {
    Value(u64),
    Prefix { value: u64, len: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionCall {
    pub action: String,
    pub params: Vec<u64>,
}

/// Mask selecting the top `len` bits of a `width`-bit value.
fn prefix_mask(width: u32, len: u32) -> u64 {
    debug_assert!(len <= width && width <= 64);
    if len == 0 {
        return 0;
    }
    let full = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    full & !(if len == width { 0 } else { (1u64 << (width - len)) - 1 })
}

#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub kind: MatchKind,
    pub key: Vec<FieldRef>,
    pub key_bits: Vec<u32>,
    pub actions: Vec<String>,
    pub default_action: ActionCall,
    exact: HashMap<Vec<u64>, ActionCall>,
    /// Per prefix length, masked value → action. Probed longest-first.
    lpm: BTreeMap<u32, HashMap<u64, ActionCall>>,
}

impl Table {
    pub fn entry_count(&self) -> usize {
        match self.kind {
            MatchKind::Exact => self.exact.len(),
            MatchKind::Lpm => self.lpm.values().map(|m| m.len()).sum(),
        }
    }

    /// Pure lookup: `None` key (a key header was absent) is an automatic miss.
    pub fn lookup(&self, key: Option<&[u64]>) -> (&ActionCall, bool) {
        let Some(key) = key else {
            return (&self.default_action, false);
        };
        match self.kind {
            MatchKind::Exact => match self.exact.get(key) {
                Some(call) => (call, true),
                None => (&self.default_action, false),
            },
            MatchKind::Lpm => {
                let v = key[0];
                let width = self.key_bits[0];
                for (&len, m) in self.lpm.iter().rev() {
                    if let Some(call) = m.get(&(v & prefix_mask(width, len))) {
                        return (call, true);
                    }
                }
                (&self.default_action, false)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDef {
    pub name: String,
    pub bits: u32,
}

/// Where a primitive argument comes from at execution time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArgSource {
    Literal(u64),
    Param(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    SetEgressPort(ArgSource),
    SetField { target: FieldRef, value: ArgSource },
    AddHeader(String),
    RemoveHeader(String),
    DecrementTtl,
    SetQueuePriority(ArgSource),
    HashSelect { dst: String, group: ArgSource },
    Drop,
    NoAction,
    Resubmit,
    Recirculate,
    CloneToPort(ArgSource),
}

#[derive(Clone, Debug)]
pub struct ActionDef {
    pub name: String,
    pub params: Vec<ParamDef>,
    pub body: Vec<Primitive>,
}

/// One step of a stage's control order.
#[derive(Clone, Debug)]
pub enum Step {
    Apply(String),
    IfValid {
        header: String,
        then_tables: Vec<String>,
        else_tables: Vec<String>,
    },
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub name: String,
    /// Custom header definitions this program parses (subset of the scenario's).
    pub defs: DefSet,
    pub actions: BTreeMap<String, ActionDef>,
    pub tables: BTreeMap<String, Table>,
    pub ingress: Vec<Step>,
    pub egress: Vec<Step>,
}

// ---------------------------------------------------------------------------
// Loading

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    name: String,
    #[serde(default)]
    headers: Vec<String>,
    #[serde(default)]
    actions: Vec<RawAction>,
    #[serde(default)]
    tables: Vec<RawTable>,
    control: RawControl,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    name: String,
    #[serde(default)]
    params: Vec<RawParam>,
    #[serde(default)]
    body: Vec<String>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    name: String,
    bits: u32,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    name: String,
    #[serde(rename = "match")]
    kind: String,
    key: Vec<String>,
    actions: Vec<String>,
    #[serde(default)]
    default_action: Option<RawCall>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCall {
    action: String,
    #[serde(default)]
    params: Vec<i64>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    #[serde(default)]
    ingress: Vec<RawStep>,
    #[serde(default)]
    egress: Vec<RawStep>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    #[serde(default)]
    apply: Option<String>,
    #[serde(default)]
    if_valid: Option<String>,
    #[serde(default)]
    then: Option<Vec<String>>,
    #[serde(rename = "else", default)]
    otherwise: Option<Vec<String>>,
}

fn parse_arg(tok: &str, params: &[ParamDef]) -> Result<ArgSource, String> {
    if let Some(name) = tok.strip_prefix('$') {
        let idx = params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| format!("unknown action parameter ${name}"))?;
        Ok(ArgSource::Param(idx))
    } else {
        Ok(ArgSource::Literal(commands::parse_value(tok)?))
    }
}

/// Checks an argument against a target width: literals must fit now, params
/// must be narrow enough that any value they admit fits.
fn check_arg_width(
    arg: ArgSource,
    target_bits: u32,
    what: &str,
    params: &[ParamDef],
) -> Result<(), String> {
    match arg {
        ArgSource::Literal(v) if !value_fits(v, target_bits) => {
            Err(format!("{what}: literal {v} does not fit {target_bits} bits"))
        }
        ArgSource::Param(i) if params[i].bits > target_bits => Err(format!(
            "{what}: parameter ${} ({} bits) is wider than the {target_bits}-bit target",
            params[i].name, params[i].bits
        )),
        _ => Ok(()),
    }
}

fn parse_body_line(line: &str, params: &[ParamDef], defs: &DefSet) -> Result<Primitive, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let (&prim, args) = toks
        .split_first()
        .ok_or_else(|| "empty action body line".to_string())?;
    let need = |n: usize| -> Result<(), String> {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("{prim}: expected {n} argument(s), got {}", args.len()))
        }
    };
    match prim {
        "set_egress_port" => {
            need(1)?;
            Ok(Primitive::SetEgressPort(parse_arg(args[0], params)?))
        }
        "set_field" => {
            need(2)?;
            let target = FieldRef::parse(args[0])?;
            if target.is_meta() && meta_read_only(&target.field) {
                return Err(format!("set_field: meta.{} is read-only", target.field));
            }
            let bits = field_bits(&target, defs)?;
            let value = parse_arg(args[1], params)?;
            check_arg_width(value, bits, &format!("set_field {}", args[0]), params)?;
            Ok(Primitive::SetField { target, value })
        }
        "add_header" => {
            need(1)?;
            if defs.get(args[0]).is_none() {
                return Err(format!("add_header: {} is not a bound header", args[0]));
            }
            Ok(Primitive::AddHeader(args[0].to_string()))
        }
        "remove_header" => {
            need(1)?;
            if defs.get(args[0]).is_none() {
                return Err(format!("remove_header: {} is not a bound header", args[0]));
            }
            Ok(Primitive::RemoveHeader(args[0].to_string()))
        }
        "decrement_ttl" => {
            need(0)?;
            Ok(Primitive::DecrementTtl)
        }
        "set_queue_priority" => {
            need(1)?;
            let arg = parse_arg(args[0], params)?;
            if let ArgSource::Literal(v) = arg {
                if v > 7 {
                    return Err(format!("set_queue_priority: qid {v} out of 0..=7"));
                }
            }
            Ok(Primitive::SetQueuePriority(arg))
        }
        "hash_select" => {
            need(2)?;
            let dst = args[0].to_string();
            if dst.contains('.') || meta_read_only(&dst) {
                return Err(format!("hash_select: {dst} is not a writable meta field"));
            }
            let group = parse_arg(args[1], params)?;
            if let ArgSource::Literal(0) = group {
                return Err("hash_select: group size 0".to_string());
            }
            Ok(Primitive::HashSelect { dst, group })
        }
        "drop" => {
            need(0)?;
            Ok(Primitive::Drop)
        }
        "no_action" => {
            need(0)?;
            Ok(Primitive::NoAction)
        }
        "resubmit" => {
            need(0)?;
            Ok(Primitive::Resubmit)
        }
        "recirculate" => {
            need(0)?;
            Ok(Primitive::Recirculate)
        }
        "clone_to_port" => {
            need(1)?;
            Ok(Primitive::CloneToPort(parse_arg(args[0], params)?))
        }
        other => Err(format!("unknown primitive {other}")),
    }
}

fn known_header(name: &str, defs: &DefSet) -> bool {
    matches!(name, "ethernet" | "ipv4" | "udp" | "tcp") || defs.get(name).is_some()
}

impl PipelineConfig {
    /// Parses and fully validates a pipeline document. `all_defs` is the
    /// scenario-wide custom header catalog; the pipeline binds the subset it
    /// names under `headers`.
    pub fn from_toml(text: &str, all_defs: &DefSet) -> Result<PipelineConfig, PipelineError> {
        let raw: RawPipeline =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if raw.name.is_empty() {
            return cfg_err("empty pipeline name");
        }
        let defs = all_defs
            .subset(&raw.headers)
            .map_err(|e| PipelineError::Config(format!("headers: {e}")))?;

        let mut actions: BTreeMap<String, ActionDef> = BTreeMap::new();
        for ra in raw.actions {
            if actions.contains_key(&ra.name) {
                return cfg_err(format!("duplicate action {}", ra.name));
            }
            let mut params = Vec::new();
            for p in &ra.params {
                if !(1..=64).contains(&p.bits) {
                    return cfg_err(format!("action {}: param {} width {}", ra.name, p.name, p.bits));
                }
                if params.iter().any(|q: &ParamDef| q.name == p.name) {
                    return cfg_err(format!("action {}: duplicate param {}", ra.name, p.name));
                }
                params.push(ParamDef { name: p.name.clone(), bits: p.bits });
            }
            let mut body = Vec::new();
            for line in &ra.body {
                body.push(
                    parse_body_line(line, &params, &defs)
                        .map_err(|e| PipelineError::Config(format!("action {}: {e}", ra.name)))?,
                );
            }
            actions.insert(ra.name.clone(), ActionDef { name: ra.name, params, body });
        }
        for (name, body) in [("drop", Primitive::Drop), ("no_action", Primitive::NoAction)] {
            actions.entry(name.to_string()).or_insert_with(|| ActionDef {
                name: name.to_string(),
                params: Vec::new(),
                body: vec![body.clone()],
            });
        }

        let mut tables: BTreeMap<String, Table> = BTreeMap::new();
        for rt in raw.tables {
            if tables.contains_key(&rt.name) {
                return cfg_err(format!("duplicate table {}", rt.name));
            }
            let kind = match rt.kind.as_str() {
                "exact" => MatchKind::Exact,
                "lpm" => MatchKind::Lpm,
                other => return cfg_err(format!("table {}: unknown match kind {other}", rt.name)),
            };
            if rt.key.is_empty() {
                return cfg_err(format!("table {}: empty key", rt.name));
            }
            if kind == MatchKind::Lpm && rt.key.len() != 1 {
                return cfg_err(format!("table {}: lpm tables take exactly one key field", rt.name));
            }
            let mut key = Vec::new();
            let mut key_bits = Vec::new();
            for k in &rt.key {
                let fr = FieldRef::parse(k)
                    .map_err(|e| PipelineError::Config(format!("table {}: {e}", rt.name)))?;
                let bits = field_bits(&fr, &defs)
                    .map_err(|e| PipelineError::Config(format!("table {}: {e}", rt.name)))?;
                key.push(fr);
                key_bits.push(bits);
            }
            if rt.actions.is_empty() {
                return cfg_err(format!("table {}: no actions", rt.name));
            }
            for a in &rt.actions {
                if !actions.contains_key(a) {
                    return cfg_err(format!("table {}: unknown action {a}", rt.name));
                }
            }
            let default_action = match rt.default_action {
                None => ActionCall { action: "drop".into(), params: Vec::new() },
                Some(rc) => {
                    let call = ActionCall {
                        action: rc.action.clone(),
                        params: rc
                            .params
                            .iter()
                            .map(|&v| u64::try_from(v).map_err(|_| {
                                PipelineError::Config(format!(
                                    "table {}: negative default param",
                                    rt.name
                                ))
                            }))
                            .collect::<Result<_, _>>()?,
                    };
                    validate_call(&actions, &rt.actions, &call)
                        .map_err(|e| PipelineError::Config(format!("table {}: {e}", rt.name)))?;
                    call
                }
            };
            tables.insert(
                rt.name.clone(),
                Table {
                    name: rt.name,
                    kind,
                    key,
                    key_bits,
                    actions: rt.actions,
                    default_action,
                    exact: HashMap::new(),
                    lpm: BTreeMap::new(),
                },
            );
        }

        let parse_steps = |raws: Vec<RawStep>, stage: &str| -> Result<Vec<Step>, PipelineError> {
            let mut steps = Vec::new();
            for rs in raws {
                let step = match (rs.apply, rs.if_valid) {
                    (Some(t), None) => {
                        if rs.then.is_some() || rs.otherwise.is_some() {
                            return cfg_err(format!("{stage}: apply step takes no branches"));
                        }
                        Step::Apply(t)
                    }
                    (None, Some(h)) => {
                        if !known_header(&h, &defs) {
                            return cfg_err(format!("{stage}: if_valid on unknown header {h}"));
                        }
                        Step::IfValid {
                            header: h,
                            then_tables: rs.then.unwrap_or_default(),
                            else_tables: rs.otherwise.unwrap_or_default(),
                        }
                    }
                    _ => return cfg_err(format!("{stage}: step needs exactly one of apply/if_valid")),
                };
                for t in step_tables(&step) {
                    if !tables.contains_key(t) {
                        return cfg_err(format!("{stage}: unknown table {t}"));
                    }
                }
                steps.push(step);
            }
            Ok(steps)
        };
        let ingress = parse_steps(raw.control.ingress, "ingress")?;
        let egress = parse_steps(raw.control.egress, "egress")?;

        let p = PipelineConfig { name: raw.name, defs, actions, tables, ingress, egress };
        p.check_stage_legality()?;
        Ok(p)
    }

    /// Ingress must not recirculate (that is an egress-side re-entry); egress
    /// must not resubmit, pick queues, or change the egress port (the packet
    /// already left the queue buffer).
    fn check_stage_legality(&self) -> Result<(), PipelineError> {
        for (steps, stage) in [(&self.ingress, "ingress"), (&self.egress, "egress")] {
            for step in steps {
                for tname in step_tables(step) {
                    let t = &self.tables[tname];
                    let mut names: Vec<&str> = t.actions.iter().map(|s| s.as_str()).collect();
                    names.push(t.default_action.action.as_str());
                    for an in names {
                        let a = &self.actions[an];
                        for prim in &a.body {
                            let bad = match (stage, prim) {
                                ("ingress", Primitive::Recirculate) => Some("recirculate"),
                                ("egress", Primitive::Resubmit) => Some("resubmit"),
                                ("egress", Primitive::SetEgressPort(_)) => Some("set_egress_port"),
                                ("egress", Primitive::SetQueuePriority(_)) => {
                                    Some("set_queue_priority")
                                }
                                _ => None,
                            };
                            if let Some(b) = bad {
                                return cfg_err(format!(
                                    "action {an} (table {tname}) uses {b} in the {stage} stage"
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    /// Validates and inserts one entry; duplicate keys are an error.
    pub fn table_add(
        &mut self,
        table: &str,
        action: &str,
        keys: &[KeyLiteral],
        params: Vec<u64>,
    ) -> Result<(), PipelineError> {
        let actions = &self.actions;
        let t = match self.tables.get_mut(table) {
            Some(t) => t,
            None => return Err(PipelineError::Entry(format!("unknown table {table}"))),
        };
        let call = ActionCall { action: action.to_string(), params };
        validate_call(actions, &t.actions, &call).map_err(PipelineError::Entry)?;
        if keys.len() != t.key.len() {
            return Err(PipelineError::Entry(format!(
                "table {table}: expected {} key value(s), got {}",
                t.key.len(),
                keys.len()
            )));
        }
        match t.kind {
            MatchKind::Exact => {
                let mut kv = Vec::with_capacity(keys.len());
                for (i, k) in keys.iter().enumerate() {
                    let KeyLiteral::Value(v) = k else {
                        return Err(PipelineError::Entry(format!(
                            "table {table}: exact keys take no prefix length"
                        )));
                    };
                    if !value_fits(*v, t.key_bits[i]) {
                        return Err(PipelineError::Entry(format!(
                            "table {table}: key {v:#x} does not fit {} bits",
                            t.key_bits[i]
                        )));
                    }
                    kv.push(*v);
                }
                if t.exact.contains_key(&kv) {
                    return Err(PipelineError::Entry(format!("table {table}: duplicate entry")));
                }
                t.exact.insert(kv, call);
            }
            MatchKind::Lpm => {
                let KeyLiteral::Prefix { value, len } = keys[0] else {
                    return Err(PipelineError::Entry(format!(
                        "table {table}: lpm key must be value/length"
                    )));
                };
                let width = t.key_bits[0];
                if len > width {
                    return Err(PipelineError::Entry(format!(
                        "table {table}: prefix length {len} exceeds {width} bits"
                    )));
                }
                if !value_fits(value, width) {
                    return Err(PipelineError::Entry(format!(
                        "table {table}: key {value:#x} does not fit {width} bits"
                    )));
                }
                let masked = value & prefix_mask(width, len);
                let bucket = t.lpm.entry(len).or_default();
                if bucket.contains_key(&masked) {
                    return Err(PipelineError::Entry(format!(
                        "table {table}: duplicate entry for {value:#x}/{len}"
                    )));
                }
                bucket.insert(masked, call);
            }
        }
        Ok(())
    }

    pub fn table_set_default(
        &mut self,
        table: &str,
        action: &str,
        params: Vec<u64>,
    ) -> Result<(), PipelineError> {
        let actions = &self.actions;
        let t = match self.tables.get_mut(table) {
            Some(t) => t,
            None => return Err(PipelineError::Entry(format!("unknown table {table}"))),
        };
        let call = ActionCall { action: action.to_string(), params };
        validate_call(actions, &t.actions, &call).map_err(PipelineError::Entry)?;
        t.default_action = call;
        Ok(())
    }
}

fn step_tables(step: &Step) -> Vec<&String> {
    match step {
        Step::Apply(t) => vec![t],
        Step::IfValid { then_tables, else_tables, .. } => {
            then_tables.iter().chain(else_tables.iter()).collect()
        }
    }
}

/// Checks an action call against the action's declared parameters and the
/// table's permitted action list.
fn validate_call(
    actions: &BTreeMap<String, ActionDef>,
    permitted: &[String],
    call: &ActionCall,
) -> Result<(), String> {
    let a = actions
        .get(&call.action)
        .ok_or_else(|| format!("unknown action {}", call.action))?;
    if !permitted.iter().any(|p| p == &call.action) {
        return Err(format!("action {} is not permitted here", call.action));
    }
    if call.params.len() != a.params.len() {
        return Err(format!(
            "action {} takes {} parameter(s), got {}",
            call.action,
            a.params.len(),
            call.params.len()
        ));
    }
    for (v, p) in call.params.iter().zip(&a.params) {
        if !value_fits(*v, p.bits) {
            return Err(format!("action {}: {} does not fit {} bits", call.action, v, p.bits));
        }
    }
    // A parameter that feeds hash_select as the group size must be positive.
    for prim in &a.body {
        if let Primitive::HashSelect { group: ArgSource::Param(i), .. } = prim {
            if call.params[*i] == 0 {
                return Err(format!("action {}: hash group size 0", call.action));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TableEvent {
    Hit { table: String, action: String },
    Miss { table: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngressVerdict {
    Forward(u32),
    Resubmit,
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EgressVerdict {
    Emit,
    Recirculate,
    Drop,
}

/// Everything a stage run reports besides the verdict. `clone_port` is a side
/// effect the caller must honor even when the verdict is a drop.
#[derive(Clone, Debug, Default)]
pub struct StageRun {
    pub events: Vec<TableEvent>,
    pub clone_port: Option<u32>,
    /// Set when an action faulted (missing header etc.); the verdict is then
    /// always `Drop` and the switch counts a pipeline error.
    pub error: Option<String>,
}

struct ExecCtx<'a> {
    view: &'a mut PacketView,
    meta: &'a mut PacketMeta,
    scratch: &'a mut BTreeMap<String, u64>,
    hash_seed: u32,
    drop: bool,
    resubmit: bool,
    recirculate: bool,
    run: StageRun,
}

pub fn extract_field(
    fr: &FieldRef,
    view: &PacketView,
    meta: &PacketMeta,
    scratch: &BTreeMap<String, u64>,
) -> Option<u64> {
    if fr.is_meta() {
        let v = match fr.field.as_str() {
            "instance_type" => meta.instance_type.as_u64(),
            "ingress_port" => meta.ingress_port as u64,
            "priority" => meta.priority as u64,
            "ingress_global_timestamp" => meta.ingress_global_timestamp.as_nanos(),
            "enq_timestamp" => meta.enq_timestamp.as_nanos(),
            "deq_timedelta" => meta.deq_timedelta.as_nanos(),
            "egress_global_timestamp" => meta.egress_global_timestamp.as_nanos(),
            other => scratch.get(other).copied().unwrap_or(0),
        };
        return Some(v);
    }
    view.field(&fr.header, &fr.field)
}

fn exec_action(
    p: &PipelineConfig,
    adef: &ActionDef,
    args: &[u64],
    ctx: &mut ExecCtx,
) -> Result<(), String> {
    let resolve = |a: &ArgSource| -> u64 {
        match a {
            ArgSource::Literal(v) => *v,
            ArgSource::Param(i) => args[*i],
        }
    };
    for prim in &adef.body {
        match prim {
            Primitive::SetEgressPort(a) => ctx.meta.egress_port = Some(resolve(a) as u32),
            Primitive::SetField { target, value } => {
                let v = resolve(value);
                if target.is_meta() {
                    ctx.scratch.insert(target.field.clone(), v);
                } else {
                    let h = ctx
                        .view
                        .find_mut(&target.header)
                        .ok_or_else(|| format!("set_field on missing header {}", target.header))?;
                    h.fields.insert(target.field.clone(), v);
                }
            }
            Primitive::AddHeader(name) => {
                let def = p.defs.get(name).expect("checked at load");
                insert_custom_view(ctx.view, &p.defs, def, &BTreeMap::new())
                    .map_err(|e| format!("add_header {name}: {e}"))?;
            }
            Primitive::RemoveHeader(name) => {
                let def = p.defs.get(name).expect("checked at load");
                strip_custom_view(ctx.view, &p.defs, def)
                    .map_err(|e| format!("remove_header {name}: {e}"))?;
            }
            Primitive::DecrementTtl => {
                let h = ctx
                    .view
                    .find_mut("ipv4")
                    .ok_or_else(|| "decrement_ttl without ipv4".to_string())?;
                let ttl = h.get("ttl").unwrap_or(0);
                if ttl == 0 {
                    ctx.drop = true;
                } else {
                    h.fields.insert("ttl".into(), ttl - 1);
                }
            }
            Primitive::SetQueuePriority(a) => {
                let v = resolve(a);
                if v > 7 {
                    return Err(format!("set_queue_priority: qid {v} out of 0..=7"));
                }
                ctx.meta.priority = v as u8;
            }
            Primitive::HashSelect { dst, group } => {
                let g = resolve(group);
                if g == 0 {
                    return Err("hash_select: group size 0".to_string());
                }
                let h = five_tuple_hash(ctx.view, ctx.hash_seed) as u64;
                ctx.scratch.insert(dst.clone(), h % g);
            }
            Primitive::Drop => ctx.drop = true,
            Primitive::NoAction => {}
            Primitive::Resubmit => ctx.resubmit = true,
            Primitive::Recirculate => ctx.recirculate = true,
            Primitive::CloneToPort(a) => ctx.run.clone_port = Some(resolve(a) as u32),
        }
    }
    Ok(())
}

fn apply_table(p: &PipelineConfig, name: &str, ctx: &mut ExecCtx) -> Result<(), String> {
    let t = &p.tables[name];
    let key: Option<Vec<u64>> = t
        .key
        .iter()
        .map(|fr| extract_field(fr, ctx.view, ctx.meta, ctx.scratch))
        .collect();
    let (call, hit) = t.lookup(key.as_deref());
    ctx.run.events.push(if hit {
        TableEvent::Hit { table: name.to_string(), action: call.action.clone() }
    } else {
        TableEvent::Miss { table: name.to_string() }
    });
    let adef = &p.actions[&call.action];
    let params = call.params.clone();
    exec_action(p, adef, &params, ctx)
}

fn run_steps(p: &PipelineConfig, steps: &[Step], ctx: &mut ExecCtx) {
    for step in steps {
        let tables: Vec<&String> = match step {
            Step::Apply(t) => vec![t],
            Step::IfValid { header, then_tables, else_tables } => {
                if ctx.view.has(header) {
                    then_tables.iter().collect()
                } else {
                    else_tables.iter().collect()
                }
            }
        };
        for t in tables {
            if let Err(e) = apply_table(p, t, ctx) {
                ctx.run.error = Some(e);
                return;
            }
        }
    }
}

/// Runs the ingress program. Any previous egress-port decision is cleared
/// first; the verdict reflects drop > resubmit > forward precedence, and a
/// forward without a chosen port is a drop.
pub fn run_ingress(
    p: &PipelineConfig,
    view: &mut PacketView,
    meta: &mut PacketMeta,
    scratch: &mut BTreeMap<String, u64>,
    hash_seed: u32,
) -> (IngressVerdict, StageRun) {
    meta.egress_port = None;
    let mut ctx = ExecCtx {
        view,
        meta,
        scratch,
        hash_seed,
        drop: false,
        resubmit: false,
        recirculate: false,
        run: StageRun::default(),
    };
    run_steps(p, &p.ingress, &mut ctx);
    let verdict = if ctx.drop || ctx.run.error.is_some() {
        IngressVerdict::Drop
    } else if ctx.resubmit {
        IngressVerdict::Resubmit
    } else {
        match ctx.meta.egress_port {
            Some(port) => IngressVerdict::Forward(port),
            None => IngressVerdict::Drop,
        }
    };
    (verdict, ctx.run)
}

/// Runs the egress program; drop > recirculate > emit.
pub fn run_egress(
    p: &PipelineConfig,
    view: &mut PacketView,
    meta: &mut PacketMeta,
    scratch: &mut BTreeMap<String, u64>,
    hash_seed: u32,
) -> (EgressVerdict, StageRun) {
    let mut ctx = ExecCtx {
        view,
        meta,
        scratch,
        hash_seed,
        drop: false,
        resubmit: false,
        recirculate: false,
        run: StageRun::default(),
    };
    run_steps(p, &p.egress, &mut ctx);
    let verdict = if ctx.drop || ctx.run.error.is_some() {
        EgressVerdict::Drop
    } else if ctx.recirculate {
        EgressVerdict::Recirculate
    } else {
        EgressVerdict::Emit
    };
    (verdict, ctx.run)
}
