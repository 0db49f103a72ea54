//! Wire devices and end hosts: point-to-point links with store-and-forward
//! transmit queues, and hosts running traffic applications.
//!
//! Like the switch, nothing here touches the event queue directly. A link
//! direction answers "when does this frame finish serializing and when does it
//! arrive"; an application answers "send now, fire me again at t". The network
//! layer owns the actual events.

use crate::packet::{
    build, deparse, insert_custom_view, parse_stack, DefSet, Packet,
};
use crate::sim::{rate_interval, SeededRng, SimTime, NANOS_PER_SEC};
use crate::stats::{Recorder, TraceKind};
use std::collections::{BTreeMap, VecDeque};

pub const TX_QUEUE_CAPACITY: usize = 1000;

/// Serialization time of `bytes` at `bandwidth_bps`, rounded to nearest ns.
pub fn serialization_time(bytes: usize, bandwidth_bps: u64) -> SimTime {
    assert!(bandwidth_bps > 0, "link bandwidth must be positive");
    let bits = bytes as u128 * 8;
    let ns = (bits * NANOS_PER_SEC as u128 + bandwidth_bps as u128 / 2) / bandwidth_bps as u128;
    SimTime::from_nanos(u64::try_from(ns).expect("serialization time overflows the clock"))
}

/// A frame mid-flight: when its serialization ends and when it lands.
#[derive(Debug)]
pub struct Transmission {
    pub tx_done: SimTime,
    pub deliver_at: SimTime,
    pub pkt: Packet,
}

/// One direction of a full-duplex link. Frames serialize one at a time;
/// later frames wait in a drop-tail queue sized like a NIC ring.
pub struct LinkDir {
    pub point: String,
    bandwidth_bps: u64,
    delay: SimTime,
    capacity: usize,
    transmitting: bool,
    queue: VecDeque<Packet>,
}

impl LinkDir {
    pub fn new(from: &str, to: &str, bandwidth_bps: u64, delay: SimTime) -> LinkDir {
        assert!(bandwidth_bps > 0, "link bandwidth must be positive");
        LinkDir {
            point: format!("link:{from}->{to}"),
            bandwidth_bps,
            delay,
            capacity: TX_QUEUE_CAPACITY,
            transmitting: false,
            queue: VecDeque::new(),
        }
    }

    #[cfg(test)]
    fn with_capacity(mut self, capacity: usize) -> LinkDir {
        self.capacity = capacity;
        self
    }

    /// Hands a frame to the device. Starts serializing immediately when the
    /// wire is free, otherwise queues (or drops) it.
    pub fn send(&mut self, pkt: Packet, now: SimTime, rec: &mut Recorder) -> Option<Transmission> {
        if self.transmitting {
            if self.queue.len() >= self.capacity {
                rec.record(
                    now,
                    TraceKind::Drop,
                    &self.point,
                    pkt.id,
                    pkt.bytes.len() as u64,
                    &[("cause", "tx_overflow".into())],
                );
                return None;
            }
            self.queue.push_back(pkt);
            return None;
        }
        Some(self.begin(pkt, now, rec))
    }

    /// Serialization finished; pulls the next queued frame onto the wire.
    pub fn tx_complete(&mut self, now: SimTime, rec: &mut Recorder) -> Option<Transmission> {
        self.transmitting = false;
        let pkt = self.queue.pop_front()?;
        Some(self.begin(pkt, now, rec))
    }

    pub fn in_flight_or_queued(&self) -> u64 {
        self.queue.len() as u64 + u64::from(self.transmitting)
    }

    fn begin(&mut self, pkt: Packet, now: SimTime, rec: &mut Recorder) -> Transmission {
        self.transmitting = true;
        let ser = serialization_time(pkt.bytes.len(), self.bandwidth_bps);
        rec.record(
            now,
            TraceKind::LinkTx,
            &self.point,
            pkt.id,
            pkt.bytes.len() as u64,
            &[("bytes", pkt.bytes.len().to_string())],
        );
        Transmission {
            tx_done: now + ser,
            deliver_at: now + ser + self.delay,
            pkt,
        }
    }
}

// ---------------------------------------------------------------------------
// Hosts and applications
// ---------------------------------------------------------------------------

/// NIC-level header insertion: outgoing frames whose UDP destination port
/// falls in the range get the named header, with per-destination field values.
#[derive(Clone, Debug)]
pub struct HeaderPolicy {
    pub header: String,
    pub port_lo: u16,
    pub port_hi: u16,
    /// dst ip → field values for the inserted header.
    pub dests: BTreeMap<u64, BTreeMap<String, u64>>,
}

#[derive(Clone, Debug)]
pub enum AppSpec {
    Cbr {
        dst_ip: u64,
        dst_port: u16,
        src_port: u16,
        rate_pps: u64,
        payload: usize,
        start: SimTime,
        stop: SimTime,
    },
    OnOff {
        dst_ip: u64,
        dst_port: u16,
        src_port: u16,
        rate_pps: u64,
        payload: usize,
        start: SimTime,
        stop: SimTime,
        on_mean_s: f64,
        off_mean_s: f64,
    },
    Sink {
        ports: Vec<u16>,
        ranges: Vec<(u16, u16)>,
    },
}

impl AppSpec {
    pub fn start_time(&self) -> Option<SimTime> {
        match self {
            AppSpec::Cbr { start, stop, .. } | AppSpec::OnOff { start, stop, .. } => {
                (start < stop).then_some(*start)
            }
            AppSpec::Sink { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum OnOffPhase {
    /// Waiting for the next on-period.
    Idle,
    /// Sending until the deadline.
    Active { until: SimTime },
}

/// What to emit for this app right now.
#[derive(Debug, Default)]
pub struct AppFireOutcome {
    pub send: Option<(u64, u16, u16, usize)>, // dst_ip, dst_port, src_port, payload
    pub next: Option<SimTime>,
}

pub struct App {
    pub spec: AppSpec,
    phase: OnOffPhase,
    rng: Option<SeededRng>,
}

impl App {
    pub fn new(spec: AppSpec, seed: u64, host: &str, index: usize) -> App {
        let rng = match &spec {
            AppSpec::OnOff { .. } => Some(SeededRng::new(seed, &format!("app:{host}:{index}"))),
            _ => None,
        };
        App {
            spec,
            phase: OnOffPhase::Idle,
            rng,
        }
    }

    pub fn sink_matches(&self, dport: u16) -> bool {
        match &self.spec {
            AppSpec::Sink { ports, ranges } => {
                ports.contains(&dport) || ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&dport))
            }
            _ => false,
        }
    }

    /// Advances the app at `now`. At most one packet per fire; `next` is the
    /// time of the following fire, if any.
    pub fn fire(&mut self, now: SimTime) -> AppFireOutcome {
        match self.spec {
            AppSpec::Cbr {
                dst_ip,
                dst_port,
                src_port,
                rate_pps,
                payload,
                stop,
                ..
            } => {
                let mut out = AppFireOutcome::default();
                if now >= stop {
                    return out;
                }
                out.send = Some((dst_ip, dst_port, src_port, payload));
                let next = now + rate_interval(rate_pps);
                if next < stop {
                    out.next = Some(next);
                }
                out
            }
            AppSpec::OnOff {
                dst_ip,
                dst_port,
                src_port,
                rate_pps,
                payload,
                stop,
                on_mean_s,
                off_mean_s,
                ..
            } => {
                let mut out = AppFireOutcome::default();
                if now >= stop {
                    return out;
                }
                // An Idle fire opens an on-period and sends its first packet
                // immediately (unless the drawn length rounds to nothing).
                if let OnOffPhase::Idle = self.phase {
                    let rng = self.rng.as_mut().expect("on/off apps carry a stream");
                    let len = SimTime::from_secs_f64(rng.exponential(on_mean_s));
                    self.phase = OnOffPhase::Active {
                        until: (now + len).min(stop),
                    };
                }
                let OnOffPhase::Active { until } = self.phase else {
                    unreachable!()
                };
                if now < until {
                    out.send = Some((dst_ip, dst_port, src_port, payload));
                    let next = now + rate_interval(rate_pps);
                    // Truncate at the boundary: the fire at `until` draws the
                    // off-period instead of sending.
                    out.next = Some(next.min(until));
                } else {
                    self.phase = OnOffPhase::Idle;
                    let rng = self.rng.as_mut().expect("on/off apps carry a stream");
                    let gap = SimTime::from_secs_f64(rng.exponential(off_mean_s));
                    let next_on = now + gap;
                    if next_on < stop {
                        out.next = Some(next_on);
                    }
                }
                out
            }
            AppSpec::Sink { .. } => AppFireOutcome::default(),
        }
    }
}

pub struct Host {
    pub name: String,
    pub ip: u64,
    pub mac: u64,
    pub policy: Option<HeaderPolicy>,
    pub apps: Vec<App>,
    pub point: String,
}

impl Host {
    pub fn new(name: &str, ip: u64, mac: u64) -> Host {
        Host {
            name: name.to_string(),
            ip,
            mac,
            policy: None,
            apps: Vec::new(),
            point: format!("host:{name}"),
        }
    }

    /// Builds the outgoing frame for an app send: Ethernet to the final
    /// destination's MAC, IPv4, UDP, zero payload; then the NIC policy, when
    /// armed for this destination and port, inserts its custom header.
    pub fn build_frame(
        &self,
        defs: &DefSet,
        dst_mac: u64,
        dst_ip: u64,
        src_port: u16,
        dst_port: u16,
        payload: usize,
    ) -> Result<Vec<u8>, String> {
        let mut view = build::udp_frame(dst_mac, self.mac, self.ip, dst_ip, src_port, dst_port, payload);
        if let Some(policy) = &self.policy {
            let in_range = (policy.port_lo..=policy.port_hi).contains(&dst_port);
            if in_range && !view.has(&policy.header) {
                if let Some(values) = policy.dests.get(&dst_ip) {
                    let def = defs
                        .get(&policy.header)
                        .ok_or_else(|| format!("policy header {} is not defined", policy.header))?;
                    insert_custom_view(&mut view, defs, def, values)
                        .map_err(|e| format!("policy insert failed: {e}"))?;
                }
            }
        }
        deparse(&view, defs).map_err(|e| format!("frame build failed: {e}"))
    }

    /// Delivers a frame to this host: parse, find the sink listening on the
    /// UDP destination port, count it there (or as unmatched).
    pub fn receive(&self, pkt: &Packet, defs: &DefSet, now: SimTime, rec: &mut Recorder) {
        let parsed = match parse_stack(&pkt.bytes, defs) {
            Ok(p) => p,
            Err(_) => {
                rec.record(
                    now,
                    TraceKind::Drop,
                    &self.point,
                    pkt.id,
                    pkt.bytes.len() as u64,
                    &[("cause", "unparsed".into())],
                );
                return;
            }
        };
        let dport = parsed.view.transport_ports().map(|(_, d)| d);
        let matched = dport.filter(|d| self.apps.iter().any(|a| a.sink_matches(*d)));
        match matched {
            Some(d) => {
                let point = format!("sink:{}:{}", self.name, d);
                rec.record(
                    now,
                    TraceKind::SinkRx,
                    &point,
                    pkt.id,
                    pkt.bytes.len() as u64,
                    &[
                        ("bytes", pkt.bytes.len().to_string()),
                        ("payload", parsed.view.payload.len().to_string()),
                        ("dport", d.to_string()),
                    ],
                );
            }
            None => {
                rec.record(
                    now,
                    TraceKind::Drop,
                    &self.point,
                    pkt.id,
                    pkt.bytes.len() as u64,
                    &[("cause", "no_sink".into())],
                );
            }
        }
    }
}
