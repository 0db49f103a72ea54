//! The programmable switch: two-priority input buffer, per-(port, priority)
//! virtual output queues with rate labels, and a single polling loop that
//! drains at the switch rate.
//!
//! The switch owns no event queue. Handlers return what to schedule
//! (`process_now`, `poll_at`) and what left the box (`emitted`); the network
//! layer turns those into events and wire transmissions. That keeps the whole
//! queue model drivable from a plain unit test.

use crate::packet::{
    deparse, parse_stack, IdGen, InstanceType, Packet, PacketMeta, PacketView,
};
use crate::pipeline::{
    run_egress, run_ingress, Command, EgressVerdict, IngressVerdict, PipelineConfig, StageRun,
    TableEvent,
};
use crate::sim::{rate_interval, SimTime};
use crate::stats::{Recorder, TraceKind};
use std::collections::{BTreeMap, VecDeque};

pub const NUM_QUEUES: usize = 8;

#[derive(Clone, Debug)]
pub struct SwitchConfig {
    pub num_ports: u32,
    /// Packets per second the polling loop can dequeue.
    pub switch_rate_pps: u64,
    /// Capacity of each input subqueue (high and low get one each).
    pub input_capacity: usize,
    /// Capacity of each virtual queue.
    pub queue_capacity: usize,
    /// Initial drain rate of every virtual queue.
    pub default_queue_rate_pps: u64,
    /// Resubmit/recirculate budget per packet before the loop guard drops it.
    pub max_internal_passes: u32,
    /// Seed mixed into `hash_select`.
    pub hash_seed: u32,
}

impl SwitchConfig {
    pub fn new(num_ports: u32) -> SwitchConfig {
        SwitchConfig {
            num_ports,
            switch_rate_pps: 1_000_000,
            input_capacity: 1000,
            queue_capacity: 1000,
            default_queue_rate_pps: 1_000_000,
            max_internal_passes: 8,
            hash_seed: 0,
        }
    }
}

/// Work waiting in the input buffer. Resubmissions keep their parsed view and
/// scratch; everything else re-parses from bytes.
enum InputItem {
    Raw { pkt: Packet, passes: u32 },
    Parsed {
        pkt: Packet,
        view: PacketView,
        scratch: BTreeMap<String, u64>,
        passes: u32,
    },
}

struct QueueEntry {
    label: SimTime,
    pkt: Packet,
    view: PacketView,
    scratch: BTreeMap<String, u64>,
    passes: u32,
}

struct VirtualQueue {
    rate_pps: u64,
    next_available: SimTime,
    fifo: VecDeque<QueueEntry>,
}

impl VirtualQueue {
    fn new(rate_pps: u64) -> VirtualQueue {
        VirtualQueue {
            rate_pps,
            next_available: SimTime::ZERO,
            fifo: VecDeque::new(),
        }
    }

    /// Assigns the entry its service label and appends it. The label is the
    /// service-completion time: one service interval after the later of its
    /// arrival and the previous label, so a burst into an idle queue spreads
    /// onto the 1/rate grid starting one interval in. Labels strictly
    /// increase within a queue; the +1ns bump only fires after a rate change
    /// clamped `next_available` backwards.
    fn push(&mut self, mut entry: QueueEntry, now: SimTime) -> SimTime {
        let mut label = now.max(self.next_available) + rate_interval(self.rate_pps);
        if let Some(tail) = self.fifo.back() {
            if label <= tail.label {
                label = tail.label + SimTime::from_nanos(1);
            }
        }
        self.next_available = label;
        entry.label = label;
        self.fifo.push_back(entry);
        label
    }

    fn head_label(&self) -> Option<SimTime> {
        self.fifo.front().map(|e| e.label)
    }

    /// Rate change. Existing labels stay; the bucket debt is clamped down to
    /// the head label (or `now`) so the new rate governs the next enqueue.
    fn set_rate(&mut self, rate_pps: u64, now: SimTime) {
        self.rate_pps = rate_pps;
        let floor = match self.fifo.front() {
            Some(e) => now.max(e.label),
            None => now,
        };
        self.next_available = self.next_available.min(floor);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SwitchCounters {
    pub received: u64,
    pub cloned: u64,
    pub emitted: u64,
    pub drop_input_overflow: u64,
    pub drop_queue_overflow: u64,
    pub drop_pipeline: u64,
    pub drop_loop_guard: u64,
}

impl SwitchCounters {
    pub fn drops(&self) -> u64 {
        self.drop_input_overflow + self.drop_queue_overflow + self.drop_pipeline + self.drop_loop_guard
    }
}

/// What a handler asks of the caller.
#[derive(Debug, Default)]
pub struct SwitchOutcome {
    /// Schedule a ProcessInput for this switch at the current time.
    pub process_now: bool,
    /// (Re)schedule the dequeue poll at this time, replacing any pending one.
    pub poll_at: Option<SimTime>,
    /// A packet left on this egress port.
    pub emitted: Option<(u32, Packet)>,
}

pub struct Switch {
    pub name: String,
    pub cfg: SwitchConfig,
    pub pipeline: PipelineConfig,
    pub counters: SwitchCounters,
    high: VecDeque<InputItem>,
    low: VecDeque<InputItem>,
    /// `queues[port][priority]`.
    queues: Vec<Vec<VirtualQueue>>,
    tick: SimTime,
    last_poll: Option<SimTime>,
    /// Time of the single in-flight DequeueAttempt, if any. Mirrors whatever
    /// the caller has scheduled; `poll_at` outputs keep it in sync.
    pending_poll: Option<SimTime>,
    last_served_port: u32,
    point_switch: String,
    queue_points: Vec<Vec<String>>,
    table_points: BTreeMap<String, String>,
}

impl Switch {
    pub fn new(name: &str, cfg: SwitchConfig, pipeline: PipelineConfig) -> Switch {
        assert!(cfg.num_ports > 0, "switch needs at least one port");
        assert!(cfg.switch_rate_pps > 0, "switch rate must be positive");
        assert!(cfg.default_queue_rate_pps > 0, "queue rate must be positive");
        assert!(cfg.max_internal_passes >= 1, "pass budget must be at least 1");
        let queues = (0..cfg.num_ports)
            .map(|_| {
                (0..NUM_QUEUES)
                    .map(|_| VirtualQueue::new(cfg.default_queue_rate_pps))
                    .collect()
            })
            .collect();
        let queue_points = (0..cfg.num_ports)
            .map(|p| {
                (0..NUM_QUEUES)
                    .map(|q| format!("queue:{name}:p{p}:q{q}"))
                    .collect()
            })
            .collect();
        let table_points = pipeline
            .tables
            .keys()
            .map(|t| (t.clone(), format!("table:{name}:{t}")))
            .collect();
        Switch {
            name: name.to_string(),
            tick: rate_interval(cfg.switch_rate_pps),
            last_served_port: cfg.num_ports - 1,
            cfg,
            pipeline,
            counters: SwitchCounters::default(),
            high: VecDeque::new(),
            low: VecDeque::new(),
            queues,
            last_poll: None,
            pending_poll: None,
            point_switch: format!("switch:{name}"),
            queue_points,
            table_points,
        }
    }

    /// Packets sitting inside the switch (input buffers plus virtual queues);
    /// the residual term of the conservation identity.
    pub fn buffered(&self) -> u64 {
        let queued: usize = self
            .queues
            .iter()
            .flat_map(|p| p.iter().map(|q| q.fifo.len()))
            .sum();
        (self.high.len() + self.low.len() + queued) as u64
    }

    /// received + cloned == emitted + drops + buffered must hold at any
    /// instant between events.
    pub fn conservation_ok(&self) -> bool {
        self.counters.received + self.counters.cloned
            == self.counters.emitted + self.counters.drops() + self.buffered()
    }

    pub fn pending_poll(&self) -> Option<SimTime> {
        self.pending_poll
    }

    /// External packet arrival. Returns true when a ProcessInput should be
    /// scheduled at `now`.
    pub fn receive(&mut self, port: u32, mut pkt: Packet, now: SimTime, rec: &mut Recorder) -> bool {
        self.counters.received += 1;
        pkt.meta = PacketMeta::on_arrival(port, now);
        if self.low.len() >= self.cfg.input_capacity {
            self.counters.drop_input_overflow += 1;
            rec.record(
                now,
                TraceKind::Drop,
                &self.point_switch,
                pkt.id,
                pkt.bytes.len() as u64,
                &[("cause", "input_overflow".into())],
            );
            return false;
        }
        self.low.push_back(InputItem::Raw { pkt, passes: 0 });
        true
    }

    /// Runs ingress for exactly one buffered packet.
    pub fn process_input(&mut self, now: SimTime, ids: &mut IdGen, rec: &mut Recorder) -> SwitchOutcome {
        let mut out = SwitchOutcome::default();
        let item = match self.high.pop_front().or_else(|| self.low.pop_front()) {
            Some(i) => i,
            None => return out,
        };
        let (mut pkt, mut view, mut scratch, passes) = match item {
            InputItem::Raw { pkt, passes } => match parse_stack(&pkt.bytes, &self.pipeline.defs) {
                Ok(parsed) => (pkt, parsed.view, BTreeMap::new(), passes),
                Err(e) => {
                    self.counters.drop_pipeline += 1;
                    rec.record(
                        now,
                        TraceKind::Drop,
                        &self.point_switch,
                        pkt.id,
                        pkt.bytes.len() as u64,
                        &[("cause", "pipeline".into())],
                    );
                    let _ = e;
                    return out;
                }
            },
            InputItem::Parsed { pkt, view, scratch, passes } => (pkt, view, scratch, passes),
        };

        let (verdict, run) = run_ingress(
            &self.pipeline,
            &mut view,
            &mut pkt.meta,
            &mut scratch,
            self.cfg.hash_seed,
        );
        self.record_stage(&run, &pkt, now, rec);
        if let Some(cp) = run.clone_port {
            self.make_clone(cp, &pkt, &view, &scratch, passes, now, ids, rec, &mut out);
        }

        match verdict {
            IngressVerdict::Drop => {
                self.counters.drop_pipeline += 1;
                rec.record(
                    now,
                    TraceKind::Drop,
                    &self.point_switch,
                    pkt.id,
                    view.wire_len(&self.pipeline.defs) as u64,
                    &[("cause", "pipeline".into())],
                );
            }
            IngressVerdict::Resubmit => {
                if passes + 1 > self.cfg.max_internal_passes {
                    self.counters.drop_loop_guard += 1;
                    rec.record(
                        now,
                        TraceKind::Drop,
                        &self.point_switch,
                        pkt.id,
                        view.wire_len(&self.pipeline.defs) as u64,
                        &[("cause", "loop_guard".into())],
                    );
                } else if self.high.len() >= self.cfg.input_capacity {
                    self.counters.drop_input_overflow += 1;
                    rec.record(
                        now,
                        TraceKind::Drop,
                        &self.point_switch,
                        pkt.id,
                        view.wire_len(&self.pipeline.defs) as u64,
                        &[("cause", "input_overflow".into())],
                    );
                } else {
                    pkt.meta.instance_type = InstanceType::Resubmit;
                    self.high.push_back(InputItem::Parsed {
                        pkt,
                        view,
                        scratch,
                        passes: passes + 1,
                    });
                    out.process_now = true;
                }
            }
            IngressVerdict::Forward(port) => {
                if port >= self.cfg.num_ports {
                    self.counters.drop_pipeline += 1;
                    rec.record(
                        now,
                        TraceKind::Drop,
                        &self.point_switch,
                        pkt.id,
                        view.wire_len(&self.pipeline.defs) as u64,
                        &[("cause", "pipeline".into())],
                    );
                } else {
                    let entry = QueueEntry {
                        label: SimTime::ZERO,
                        pkt,
                        view,
                        scratch,
                        passes,
                    };
                    if let Some(poll) = self.enqueue(port, entry, now, rec) {
                        out.poll_at = Some(out.poll_at.map_or(poll, |t| t.min(poll)));
                    }
                }
            }
        }
        out
    }

    /// One poll of the virtual queues: serve at most one eligible head, run
    /// egress on it, then re-arm.
    pub fn dequeue_attempt(&mut self, now: SimTime, ids: &mut IdGen, rec: &mut Recorder) -> SwitchOutcome {
        debug_assert_eq!(self.pending_poll, Some(now), "stray dequeue attempt");
        self.pending_poll = None;
        self.last_poll = Some(now);
        let mut out = SwitchOutcome::default();

        let mut serve = None;
        let n = self.cfg.num_ports;
        'scan: for i in 1..=n {
            let p = (self.last_served_port + i) % n;
            for q in 0..NUM_QUEUES {
                let eligible = self.queues[p as usize][q]
                    .head_label()
                    .is_some_and(|l| l <= now);
                if eligible {
                    serve = Some((p, q));
                    break 'scan;
                }
            }
        }

        let served = serve.is_some();
        if let Some((port, qid)) = serve {
            self.last_served_port = port;
            let entry = self.queues[port as usize][qid].fifo.pop_front().expect("head checked");
            let QueueEntry {
                label,
                mut pkt,
                mut view,
                mut scratch,
                passes,
            } = entry;
            pkt.meta.deq_timedelta = now.saturating_sub(pkt.meta.enq_timestamp);
            pkt.meta.egress_global_timestamp = now;
            rec.record(
                now,
                TraceKind::Dequeue,
                &self.queue_points[port as usize][qid],
                pkt.id,
                view.wire_len(&self.pipeline.defs) as u64,
                &[
                    ("label_ns", label.as_nanos().to_string()),
                    ("enq_ns", pkt.meta.enq_timestamp.as_nanos().to_string()),
                    ("delta_ns", pkt.meta.deq_timedelta.as_nanos().to_string()),
                    ("itype", pkt.meta.instance_type.label().to_string()),
                    (
                        "ingress_ns",
                        pkt.meta.ingress_global_timestamp.as_nanos().to_string(),
                    ),
                ],
            );

            let (verdict, run) = run_egress(
                &self.pipeline,
                &mut view,
                &mut pkt.meta,
                &mut scratch,
                self.cfg.hash_seed,
            );
            self.record_stage(&run, &pkt, now, rec);
            if let Some(cp) = run.clone_port {
                self.make_clone(cp, &pkt, &view, &scratch, passes, now, ids, rec, &mut out);
            }

            match verdict {
                EgressVerdict::Drop => {
                    self.counters.drop_pipeline += 1;
                    rec.record(
                        now,
                        TraceKind::Drop,
                        &self.point_switch,
                        pkt.id,
                        view.wire_len(&self.pipeline.defs) as u64,
                        &[("cause", "pipeline".into())],
                    );
                }
                EgressVerdict::Recirculate => {
                    if passes + 1 > self.cfg.max_internal_passes {
                        self.counters.drop_loop_guard += 1;
                        rec.record(
                            now,
                            TraceKind::Drop,
                            &self.point_switch,
                            pkt.id,
                            view.wire_len(&self.pipeline.defs) as u64,
                            &[("cause", "loop_guard".into())],
                        );
                    } else if self.high.len() >= self.cfg.input_capacity {
                        self.counters.drop_input_overflow += 1;
                        rec.record(
                            now,
                            TraceKind::Drop,
                            &self.point_switch,
                            pkt.id,
                            view.wire_len(&self.pipeline.defs) as u64,
                            &[("cause", "input_overflow".into())],
                        );
                    } else {
                        match deparse(&view, &self.pipeline.defs) {
                            Ok(bytes) => {
                                pkt.bytes = bytes;
                                pkt.meta.instance_type = InstanceType::Recirculate;
                                self.high.push_back(InputItem::Raw {
                                    pkt,
                                    passes: passes + 1,
                                });
                                out.process_now = true;
                            }
                            Err(_) => {
                                self.counters.drop_pipeline += 1;
                                rec.record(
                                    now,
                                    TraceKind::Drop,
                                    &self.point_switch,
                                    pkt.id,
                                    0,
                                    &[("cause", "pipeline".into())],
                                );
                            }
                        }
                    }
                }
                EgressVerdict::Emit => match deparse(&view, &self.pipeline.defs) {
                    Ok(bytes) => {
                        pkt.bytes = bytes;
                        self.counters.emitted += 1;
                        out.emitted = Some((port, pkt));
                    }
                    Err(_) => {
                        self.counters.drop_pipeline += 1;
                        rec.record(
                            now,
                            TraceKind::Drop,
                            &self.point_switch,
                            pkt.id,
                            0,
                            &[("cause", "pipeline".into())],
                        );
                    }
                },
            }
        }

        // Re-arm: the next grid tick whenever something was served (or could
        // have been); an idle poll with all labels in the future skips ahead
        // to the first grid tick covering the earliest label.
        let min_label = self
            .queues
            .iter()
            .flat_map(|p| p.iter().filter_map(|q| q.head_label()))
            .min();
        if let Some(l) = min_label {
            let target = if served { self.poll_target(now) } else { self.poll_target(l) };
            self.pending_poll = Some(target);
            out.poll_at = Some(target);
        }
        out
    }

    /// Applies one runtime command. Table programming delegates to the
    /// pipeline; rate changes touch the queue model directly.
    pub fn apply_command(&mut self, cmd: &Command, now: SimTime) -> Result<(), String> {
        match cmd {
            Command::TableAdd { table, action, keys, params } => self
                .pipeline
                .table_add(table, action, keys, params.clone())
                .map_err(|e| e.to_string()),
            Command::TableSetDefault { table, action, params } => self
                .pipeline
                .table_set_default(table, action, params.clone())
                .map_err(|e| e.to_string()),
            Command::SetQueueRate { port, qid, rate_pps } => {
                if *port >= self.cfg.num_ports {
                    return Err(format!("port {port} out of range"));
                }
                if *qid as usize >= NUM_QUEUES {
                    return Err(format!("queue id {qid} out of range"));
                }
                if *rate_pps == 0 {
                    return Err("queue rate must be positive".into());
                }
                self.queues[*port as usize][*qid as usize].set_rate(*rate_pps, now);
                Ok(())
            }
            Command::SetSwitchRate { rate_pps } => {
                if *rate_pps == 0 {
                    return Err("switch rate must be positive".into());
                }
                self.cfg.switch_rate_pps = *rate_pps;
                self.tick = rate_interval(*rate_pps);
                Ok(())
            }
        }
    }

    #[cfg(test)]
    fn queue_rate(&self, port: u32, qid: usize) -> u64 {
        self.queues[port as usize][qid].rate_pps
    }

    #[cfg(test)]
    fn queue_next_available(&self, port: u32, qid: usize) -> SimTime {
        self.queues[port as usize][qid].next_available
    }

    // -- internals ---------------------------------------------------------

    fn record_stage(&self, run: &StageRun, pkt: &Packet, now: SimTime, rec: &mut Recorder) {
        for ev in &run.events {
            match ev {
                TableEvent::Hit { table, action } => rec.record(
                    now,
                    TraceKind::TableHit,
                    &self.table_points[table],
                    pkt.id,
                    0,
                    &[
                        ("itype", pkt.meta.instance_type.label().to_string()),
                        ("action", action.clone()),
                    ],
                ),
                TableEvent::Miss { table } => rec.record(
                    now,
                    TraceKind::TableMiss,
                    &self.table_points[table],
                    pkt.id,
                    0,
                    &[("itype", pkt.meta.instance_type.label().to_string())],
                ),
            }
        }
    }

    /// Enqueues into `queues[port][meta.priority]`, stamping the enqueue
    /// timestamp. Returns the poll adjustment, if any.
    fn enqueue(
        &mut self,
        port: u32,
        mut entry: QueueEntry,
        now: SimTime,
        rec: &mut Recorder,
    ) -> Option<SimTime> {
        let qid = entry.pkt.meta.priority as usize;
        let q = &mut self.queues[port as usize][qid];
        if q.fifo.len() >= self.cfg.queue_capacity {
            self.counters.drop_queue_overflow += 1;
            rec.record(
                now,
                TraceKind::Drop,
                &self.queue_points[port as usize][qid],
                entry.pkt.id,
                entry.view.wire_len(&self.pipeline.defs) as u64,
                &[("cause", "queue_overflow".into())],
            );
            return None;
        }
        entry.pkt.meta.enq_timestamp = now;
        let id = entry.pkt.id;
        let bytes = entry.view.wire_len(&self.pipeline.defs) as u64;
        let label = q.push(entry, now);
        rec.record(
            now,
            TraceKind::Enqueue,
            &self.queue_points[port as usize][qid],
            id,
            bytes,
            &[("label_ns", label.as_nanos().to_string())],
        );
        self.ensure_poll(label, now)
    }

    /// Queues a clone of the packet on `clone_port` at the original's
    /// priority. Clones count toward conservation as extra inputs.
    #[allow(clippy::too_many_arguments)]
    fn make_clone(
        &mut self,
        clone_port: u32,
        pkt: &Packet,
        view: &PacketView,
        scratch: &BTreeMap<String, u64>,
        passes: u32,
        now: SimTime,
        ids: &mut IdGen,
        rec: &mut Recorder,
        out: &mut SwitchOutcome,
    ) {
        // Clones of clones are suppressed at config load; guard anyway.
        if pkt.meta.instance_type == InstanceType::Clone {
            return;
        }
        self.counters.cloned += 1;
        if clone_port >= self.cfg.num_ports {
            self.counters.drop_pipeline += 1;
            rec.record(
                now,
                TraceKind::Drop,
                &self.point_switch,
                pkt.id,
                view.wire_len(&self.pipeline.defs) as u64,
                &[("cause", "pipeline".into())],
            );
            return;
        }
        let mut meta = pkt.meta.clone();
        meta.instance_type = InstanceType::Clone;
        let clone = Packet {
            id: ids.next(),
            bytes: Vec::new(),
            meta,
        };
        let entry = QueueEntry {
            label: SimTime::ZERO,
            pkt: clone,
            view: view.clone(),
            scratch: scratch.clone(),
            passes,
        };
        if let Some(poll) = self.enqueue(clone_port, entry, now, rec) {
            out.poll_at = Some(out.poll_at.map_or(poll, |t| t.min(poll)));
        }
    }

    /// Smallest poll-grid time at or after `t`. The grid is anchored at the
    /// last poll and spaced by the current tick; before the first poll it is
    /// anchored on `t` itself (labels are service completions, so the first
    /// useful attempt is exactly at the label).
    fn poll_target(&self, t: SimTime) -> SimTime {
        match self.last_poll {
            None => t,
            Some(lp) => {
                let gap = t.saturating_sub(lp).as_nanos();
                let tick = self.tick.as_nanos();
                let k = gap.div_ceil(tick);
                lp + SimTime::from_nanos(k.max(1) * tick)
            }
        }
    }

    /// After an enqueue with service label `label`: make sure a poll lands on
    /// the first grid tick that could serve it, pulling the pending poll
    /// earlier if needed (never pushing it later).
    fn ensure_poll(&mut self, label: SimTime, now: SimTime) -> Option<SimTime> {
        let target = self.poll_target(label.max(now));
        match self.pending_poll {
            Some(t) if t <= target => None,
            _ => {
                self.pending_poll = Some(target);
                Some(target)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build, DefSet};
    use crate::pipeline::{KeyLiteral, PipelineConfig};
    use crate::sim::{EventHandle, Scheduler};

    /// Routes on udp.dst_port; the action picks egress port and priority.
    const PORTMAP: &str = r#"
name = "portmap"

[[actions]]
name = "to_port"
params = [{ name = "port", bits = 32 }, { name = "prio", bits = 8 }]
body = ["set_queue_priority $prio", "set_egress_port $port"]

[[tables]]
name = "route"
match = "exact"
key = ["udp.dst_port"]
actions = ["to_port", "drop"]

[control]
ingress = [{ apply = "route" }]
"#;

    fn portmap(entries: &[(u64, u64, u64)]) -> PipelineConfig {
        let mut p = PipelineConfig::from_toml(PORTMAP, &DefSet::new()).unwrap();
        for &(dport, port, prio) in entries {
            p.table_add("route", "to_port", &[KeyLiteral::Value(dport)], vec![port, prio])
                .unwrap();
        }
        p
    }

    fn udp_packet(id: u64, dst_port: u16) -> Packet {
        let view = build::udp_frame(0x02, 0x01, 0x0a000001, 0x0a000002, 5000, dst_port, 18);
        Packet::new(id, deparse(&view, &DefSet::new()).unwrap())
    }

    enum Ev {
        Arrive(u32, Packet),
        Proc,
        Poll,
    }

    struct Driver {
        sw: Switch,
        ids: IdGen,
        rec: Recorder,
        emitted: Vec<(SimTime, u32, Packet)>,
        poll: Option<EventHandle>,
    }

    impl Driver {
        fn apply(&mut self, sched: &mut Scheduler<Ev>, now: SimTime, out: SwitchOutcome) {
            if out.process_now {
                sched.schedule(now, Ev::Proc);
            }
            if let Some(t) = out.poll_at {
                if let Some(h) = self.poll.take() {
                    sched.cancel(h);
                }
                self.poll = Some(sched.schedule(t, Ev::Poll));
            }
            if let Some((port, pkt)) = out.emitted {
                self.emitted.push((now, port, pkt));
            }
        }
    }

    /// Runs the switch under a real event loop: arrivals in, emissions out.
    fn drive(sw: Switch, arrivals: Vec<(SimTime, u32, Packet)>, until: SimTime) -> Driver {
        let mut sched: Scheduler<Ev> = Scheduler::new();
        for (t, port, pkt) in arrivals {
            sched.schedule(t, Ev::Arrive(port, pkt));
        }
        let mut rec = Recorder::new(SimTime::from_millis(100));
        rec.keep_events(true);
        let mut w = Driver {
            sw,
            ids: IdGen::new(),
            rec,
            emitted: Vec::new(),
            poll: None,
        };
        // Clone ids start high so they never collide with test packet ids.
        for _ in 0..1000 {
            w.ids.next();
        }
        sched.run_until(until, &mut w, |w, sched, ev| {
            let now = ev.fire_at;
            match ev.payload {
                Ev::Arrive(port, pkt) => {
                    if w.sw.receive(port, pkt, now, &mut w.rec) {
                        sched.schedule(now, Ev::Proc);
                    }
                }
                Ev::Proc => {
                    let out = w.sw.process_input(now, &mut w.ids, &mut w.rec);
                    w.apply(sched, now, out);
                }
                Ev::Poll => {
                    w.poll = None;
                    let out = w.sw.dequeue_attempt(now, &mut w.ids, &mut w.rec);
                    w.apply(sched, now, out);
                }
            }
        });
        w
    }

    fn events_of(d: &Driver, kind: TraceKind) -> Vec<&crate::stats::TraceEvent> {
        d.rec.events.iter().filter(|e| e.kind == kind).collect()
    }

    #[test]
    fn burst_is_labeled_and_served_at_the_queue_rate() {
        // Queue drains at 1000 pps (1ms spacing), switch polls at 1 MHz.
        let mut cfg = SwitchConfig::new(2);
        cfg.default_queue_rate_pps = 1000;
        let sw = Switch::new("s", cfg, portmap(&[(9000, 1, 0)]));
        let arrivals = (0..5)
            .map(|i| (SimTime::ZERO, 0, udp_packet(i, 9000)))
            .collect();
        let d = drive(sw, arrivals, SimTime::from_secs(1));

        let ms = |n: u64| SimTime::from_millis(n).as_nanos();
        let labels: Vec<u64> = events_of(&d, TraceKind::Enqueue)
            .iter()
            .map(|e| e.detail_u64("label_ns").unwrap())
            .collect();
        assert_eq!(labels, vec![ms(1), ms(2), ms(3), ms(4), ms(5)]);

        // Labels land on the poll grid, so service is exactly on label.
        let times: Vec<u64> = d.emitted.iter().map(|(t, _, _)| t.as_nanos()).collect();
        assert_eq!(times, vec![ms(1), ms(2), ms(3), ms(4), ms(5)]);

        for (t, _, pkt) in &d.emitted {
            assert_eq!(pkt.meta.egress_global_timestamp, *t);
            assert_eq!(pkt.meta.enq_timestamp, SimTime::ZERO);
            assert_eq!(pkt.meta.deq_timedelta, *t);
            // NORMAL packets: ingress and enqueue stamps coincide.
            assert_eq!(pkt.meta.ingress_global_timestamp, pkt.meta.enq_timestamp);
        }

        // Drained queue stops the poll loop.
        assert_eq!(d.sw.pending_poll(), None);
        assert_eq!(d.sw.counters.emitted, 5);
        assert!(d.sw.conservation_ok());
    }

    #[test]
    fn lower_queue_id_wins_when_both_eligible() {
        let sw = Switch::new(
            "s",
            SwitchConfig::new(2),
            portmap(&[(9000, 1, 0), (9001, 1, 7)]),
        );
        // The q7 packet arrives first; q0 must still be served first.
        let arrivals = vec![
            (SimTime::ZERO, 0, udp_packet(1, 9001)),
            (SimTime::ZERO, 0, udp_packet(2, 9000)),
        ];
        let d = drive(sw, arrivals, SimTime::from_secs(1));
        let order: Vec<u64> = d.emitted.iter().map(|(_, _, p)| p.id).collect();
        assert_eq!(order, vec![2, 1]);
    }

    #[test]
    fn ports_are_served_round_robin() {
        let sw = Switch::new(
            "s",
            SwitchConfig::new(4),
            portmap(&[(9001, 1, 0), (9002, 2, 0), (9003, 3, 0)]),
        );
        let mut arrivals = Vec::new();
        let mut id = 0;
        for _ in 0..2 {
            for dport in [9001u16, 9002, 9003] {
                arrivals.push((SimTime::ZERO, 0, udp_packet(id, dport)));
                id += 1;
            }
        }
        let d = drive(sw, arrivals, SimTime::from_secs(1));
        let ports: Vec<u32> = d.emitted.iter().map(|(_, p, _)| *p).collect();
        assert_eq!(ports, vec![1, 2, 3, 1, 2, 3]);
    }

    const RESUBMIT_ONCE: &str = r#"
name = "resubmit_once"

[[actions]]
name = "again"
body = ["resubmit"]

[[actions]]
name = "to_port"
params = [{ name = "port", bits = 32 }]
body = ["set_egress_port $port"]

[[tables]]
name = "phase"
match = "exact"
key = ["meta.instance_type"]
actions = ["again", "to_port"]

[control]
ingress = [{ apply = "phase" }]
"#;

    fn resubmit_once() -> PipelineConfig {
        let mut p = PipelineConfig::from_toml(RESUBMIT_ONCE, &DefSet::new()).unwrap();
        p.table_add("phase", "again", &[KeyLiteral::Value(0)], vec![]).unwrap();
        p.table_add("phase", "to_port", &[KeyLiteral::Value(1)], vec![1]).unwrap();
        p
    }

    #[test]
    fn resubmission_processes_before_later_arrivals() {
        let sw = Switch::new("s", SwitchConfig::new(2), resubmit_once());
        let arrivals = vec![
            (SimTime::ZERO, 0, udp_packet(10, 9000)),
            (SimTime::ZERO, 0, udp_packet(11, 9000)),
        ];
        let d = drive(sw, arrivals, SimTime::from_secs(1));

        // High-before-low ordering: packet 10's resubmission runs before
        // packet 11's first pass even though 11 was already buffered.
        let hits: Vec<(u64, String)> = events_of(&d, TraceKind::TableHit)
            .iter()
            .map(|e| (e.pkt, e.detail_str("itype").unwrap().to_string()))
            .collect();
        assert_eq!(
            hits,
            vec![
                (10, "NORMAL".to_string()),
                (10, "RESUBMIT".to_string()),
                (11, "NORMAL".to_string()),
                (11, "RESUBMIT".to_string()),
            ]
        );
        assert_eq!(d.sw.counters.emitted, 2);
        for (_, _, pkt) in &d.emitted {
            assert_eq!(pkt.meta.instance_type, InstanceType::Resubmit);
        }
        assert!(d.sw.conservation_ok());
    }

    #[test]
    fn loop_guard_stops_endless_resubmission() {
        let mut p = PipelineConfig::from_toml(RESUBMIT_ONCE, &DefSet::new()).unwrap();
        p.table_set_default("phase", "again", vec![]).unwrap();
        let mut cfg = SwitchConfig::new(2);
        cfg.max_internal_passes = 3;
        let sw = Switch::new("s", cfg, p);
        let d = drive(sw, vec![(SimTime::ZERO, 0, udp_packet(1, 9000))], SimTime::from_secs(1));
        assert_eq!(d.sw.counters.drop_loop_guard, 1);
        assert_eq!(d.sw.counters.emitted, 0);
        // NORMAL pass plus three permitted resubmissions ran the table; the
        // empty table misses into the resubmitting default every time.
        assert_eq!(events_of(&d, TraceKind::TableMiss).len(), 4);
        assert!(d.sw.conservation_ok());
    }

    const RECIRC_ONCE: &str = r#"
name = "recirc_once"

[[actions]]
name = "to_port"
params = [{ name = "port", bits = 32 }]
body = ["set_egress_port $port"]

[[actions]]
name = "spin"
body = ["recirculate"]

[[tables]]
name = "route"
match = "exact"
key = ["udp.dst_port"]
actions = ["to_port", "drop"]

[[tables]]
name = "spin_once"
match = "exact"
key = ["meta.instance_type"]
actions = ["spin", "no_action"]

[control]
ingress = [{ apply = "route" }]
egress = [{ apply = "spin_once" }]
"#;

    #[test]
    fn recirculation_reparses_and_reenters_ingress() {
        let mut p = PipelineConfig::from_toml(RECIRC_ONCE, &DefSet::new()).unwrap();
        p.table_add("route", "to_port", &[KeyLiteral::Value(9000)], vec![1]).unwrap();
        p.table_add("spin_once", "spin", &[KeyLiteral::Value(0)], vec![]).unwrap();
        p.table_set_default("spin_once", "no_action", vec![]).unwrap();
        let sw = Switch::new("s", SwitchConfig::new(2), p);
        let d = drive(sw, vec![(SimTime::ZERO, 0, udp_packet(1, 9000))], SimTime::from_secs(1));

        assert_eq!(d.sw.counters.emitted, 1);
        let (t, port, pkt) = &d.emitted[0];
        assert_eq!(*port, 1);
        assert_eq!(pkt.meta.instance_type, InstanceType::Recirculate);
        // Dequeued once as NORMAL (at the first tick), once recirculated.
        let itypes: Vec<&str> = events_of(&d, TraceKind::Dequeue)
            .iter()
            .map(|e| e.detail_str("itype").unwrap())
            .collect();
        assert_eq!(itypes, vec!["NORMAL", "RECIRCULATE"]);
        assert_eq!(t.as_nanos(), 2_000);
        assert!(d.sw.conservation_ok());
    }

    const CLONE_AND_DROP: &str = r#"
name = "clone_and_drop"

[[actions]]
name = "to_port"
params = [{ name = "port", bits = 32 }]
body = ["set_egress_port $port"]

[[actions]]
name = "mirror_then_drop"
body = ["clone_to_port 2", "drop"]

[[tables]]
name = "route"
match = "exact"
key = ["udp.dst_port"]
actions = ["to_port", "drop"]

[[tables]]
name = "mirror"
match = "exact"
key = ["meta.instance_type"]
actions = ["mirror_then_drop", "no_action"]

[control]
ingress = [{ apply = "route" }]
egress = [{ apply = "mirror" }]
"#;

    #[test]
    fn clone_survives_a_dropped_original() {
        let mut p = PipelineConfig::from_toml(CLONE_AND_DROP, &DefSet::new()).unwrap();
        p.table_add("route", "to_port", &[KeyLiteral::Value(9000)], vec![1]).unwrap();
        p.table_add("mirror", "mirror_then_drop", &[KeyLiteral::Value(0)], vec![]).unwrap();
        p.table_set_default("mirror", "no_action", vec![]).unwrap();
        let sw = Switch::new("s", SwitchConfig::new(3), p);
        let d = drive(sw, vec![(SimTime::ZERO, 0, udp_packet(7, 9000))], SimTime::from_secs(1));

        assert_eq!(d.sw.counters.cloned, 1);
        assert_eq!(d.sw.counters.drop_pipeline, 1);
        assert_eq!(d.sw.counters.emitted, 1);
        let (_, port, pkt) = &d.emitted[0];
        assert_eq!(*port, 2);
        assert_eq!(pkt.meta.instance_type, InstanceType::Clone);
        assert!(pkt.id >= 1000, "clone ids come from the shared generator");
        // Clone inherits arrival context from the original.
        assert_eq!(pkt.meta.ingress_port, 0);
        assert_eq!(pkt.meta.ingress_global_timestamp, SimTime::ZERO);
        assert!(d.sw.conservation_ok());
    }

    #[test]
    fn tight_queue_drops_second_of_backtoback_pair() {
        let mut cfg = SwitchConfig::new(2);
        cfg.queue_capacity = 1;
        let sw = Switch::new("s", cfg, portmap(&[(9000, 1, 0)]));
        let arrivals = vec![
            (SimTime::ZERO, 0, udp_packet(1, 9000)),
            (SimTime::ZERO, 0, udp_packet(2, 9000)),
        ];
        let d = drive(sw, arrivals, SimTime::from_secs(1));
        assert_eq!(d.sw.counters.drop_queue_overflow, 1);
        assert_eq!(d.sw.counters.emitted, 1);
        assert_eq!(d.emitted[0].2.id, 1);
        let drops = events_of(&d, TraceKind::Drop);
        assert_eq!(drops.len(), 1);
        assert_eq!(drops[0].point, "queue:s:p1:q0");
        assert_eq!(drops[0].detail_str("cause"), Some("queue_overflow"));
        assert!(d.sw.conservation_ok());
    }

    #[test]
    fn full_input_buffer_sheds_arrivals() {
        let mut cfg = SwitchConfig::new(2);
        cfg.input_capacity = 2;
        let sw = Switch::new("s", cfg, portmap(&[(9000, 1, 0)]));
        let arrivals = (0..3)
            .map(|i| (SimTime::ZERO, 0, udp_packet(i, 9000)))
            .collect();
        let d = drive(sw, arrivals, SimTime::from_secs(1));
        assert_eq!(d.sw.counters.drop_input_overflow, 1);
        assert_eq!(d.sw.counters.emitted, 2);
        assert!(d.sw.conservation_ok());
    }

    #[test]
    fn miss_uses_the_implicit_drop_default() {
        let sw = Switch::new("s", SwitchConfig::new(2), portmap(&[(9000, 1, 0)]));
        let arrivals = vec![
            (SimTime::ZERO, 0, udp_packet(1, 9000)),
            (SimTime::from_millis(1), 0, udp_packet(2, 9999)),
        ];
        let d = drive(sw, arrivals, SimTime::from_secs(1));
        assert_eq!(d.sw.counters.emitted, 1);
        assert_eq!(d.sw.counters.drop_pipeline, 1);
        assert_eq!(events_of(&d, TraceKind::TableMiss).len(), 1);
        assert!(d.sw.conservation_ok());
    }

    // Direct-call tests for the queue bookkeeping, no event loop.

    fn direct() -> (Switch, IdGen, Recorder) {
        let mut cfg = SwitchConfig::new(2);
        cfg.default_queue_rate_pps = 1000;
        let sw = Switch::new("s", cfg, portmap(&[(9000, 1, 0)]));
        let mut rec = Recorder::new(SimTime::from_millis(100));
        rec.keep_events(true);
        (sw, IdGen::new(), rec)
    }

    fn feed(sw: &mut Switch, ids: &mut IdGen, rec: &mut Recorder, id: u64, now: SimTime) {
        assert!(sw.receive(0, udp_packet(id, 9000), now, rec));
        sw.process_input(now, ids, rec);
    }

    #[test]
    fn rate_change_clamps_bucket_debt_and_keeps_labels_increasing() {
        let (mut sw, mut ids, mut rec) = direct();
        let t0 = SimTime::ZERO;
        for id in 0..3 {
            feed(&mut sw, &mut ids, &mut rec, id, t0);
        }
        assert_eq!(sw.queue_next_available(1, 0), SimTime::from_millis(3));

        sw.apply_command(
            &Command::SetQueueRate { port: 1, qid: 0, rate_pps: 2000 },
            t0,
        )
        .unwrap();
        // Debt collapses to the head label; the next push then computes
        // head + 0.5ms, which sits inside the backlog, so the tail bump
        // lands it just past the tail to stay strictly increasing.
        assert_eq!(sw.queue_next_available(1, 0), SimTime::from_millis(1));
        feed(&mut sw, &mut ids, &mut rec, 3, t0);
        let labels: Vec<u64> = rec
            .events
            .iter()
            .filter(|e| e.kind == TraceKind::Enqueue)
            .map(|e| e.detail_u64("label_ns").unwrap())
            .collect();
        assert_eq!(labels, vec![1_000_000, 2_000_000, 3_000_000, 3_000_001]);
        assert_eq!(sw.queue_rate(1, 0), 2000);
        assert_eq!(sw.queue_next_available(1, 0), SimTime::from_nanos(3_000_001));
    }

    #[test]
    fn rate_change_on_idle_queue_starts_fresh_at_next_enqueue() {
        let (mut sw, mut ids, mut rec) = direct();
        feed(&mut sw, &mut ids, &mut rec, 0, SimTime::ZERO);
        // Drain it.
        let poll = sw.pending_poll().unwrap();
        let out = sw.dequeue_attempt(poll, &mut ids, &mut rec);
        assert!(out.emitted.is_some());
        assert_eq!(sw.pending_poll(), None);

        let t = SimTime::from_millis(2);
        sw.apply_command(&Command::SetQueueRate { port: 1, qid: 0, rate_pps: 2000 }, t)
            .unwrap();
        feed(&mut sw, &mut ids, &mut rec, 1, t);
        // One new-rate interval past the arrival, nothing left over from the
        // old rate.
        let last = rec.events.iter().rev().find(|e| e.kind == TraceKind::Enqueue).unwrap();
        assert_eq!(last.detail_u64("label_ns"), Some((t + SimTime::from_micros(500)).as_nanos()));
        assert_eq!(sw.queue_next_available(1, 0), t + SimTime::from_micros(500));
    }

    #[test]
    fn queue_rate_command_rejects_bad_arguments() {
        let (mut sw, _, _) = direct();
        let t = SimTime::ZERO;
        assert!(sw
            .apply_command(&Command::SetQueueRate { port: 9, qid: 0, rate_pps: 1 }, t)
            .is_err());
        assert!(sw
            .apply_command(&Command::SetQueueRate { port: 1, qid: 8, rate_pps: 1 }, t)
            .is_err());
        assert!(sw
            .apply_command(&Command::SetQueueRate { port: 1, qid: 0, rate_pps: 0 }, t)
            .is_err());
        assert!(sw.apply_command(&Command::SetSwitchRate { rate_pps: 0 }, t).is_err());
    }

    #[test]
    fn switch_rate_change_leaves_pending_poll_alone() {
        let (mut sw, mut ids, mut rec) = direct();
        feed(&mut sw, &mut ids, &mut rec, 0, SimTime::ZERO);
        feed(&mut sw, &mut ids, &mut rec, 1, SimTime::ZERO);
        assert_eq!(sw.pending_poll(), Some(SimTime::from_millis(1)));

        sw.apply_command(&Command::SetSwitchRate { rate_pps: 500_000 }, SimTime::ZERO)
            .unwrap();
        // Pending attempt keeps its old time; the grid after it uses the new
        // tick. Second label is at 2ms, so the idle skip walks the 2us grid
        // from 1.002ms and lands exactly on it.
        assert_eq!(sw.pending_poll(), Some(SimTime::from_millis(1)));
        let out = sw.dequeue_attempt(SimTime::from_millis(1), &mut ids, &mut rec);
        assert!(out.emitted.is_some());
        let next = out.poll_at.unwrap();
        assert_eq!(next.as_nanos(), 1_002_000);
        let out = sw.dequeue_attempt(next, &mut ids, &mut rec);
        assert!(out.emitted.is_none());
        assert_eq!(out.poll_at, Some(SimTime::from_millis(2)));
    }

    #[test]
    fn idle_poll_skips_ahead_to_the_earliest_label() {
        let (mut sw, mut ids, mut rec) = direct();
        for id in 0..2 {
            feed(&mut sw, &mut ids, &mut rec, id, SimTime::ZERO);
        }
        // Serve the first packet right at its label.
        let out = sw.dequeue_attempt(SimTime::from_millis(1), &mut ids, &mut rec);
        assert!(out.emitted.is_some());
        // Queue still holds the 2ms label; next poll is one tick later...
        assert_eq!(out.poll_at.map(|t| t.as_nanos()), Some(1_001_000));
        // ...which finds nothing eligible and jumps to the grid point at the
        // label (1.001ms anchor + 999 ticks = exactly 2ms).
        let out = sw.dequeue_attempt(SimTime::from_nanos(1_001_000), &mut ids, &mut rec);
        assert!(out.emitted.is_none());
        assert_eq!(out.poll_at, Some(SimTime::from_millis(2)));
        let out = sw.dequeue_attempt(SimTime::from_millis(2), &mut ids, &mut rec);
        assert!(out.emitted.is_some());
        assert_eq!(out.poll_at, None);
    }
}
