//! Counters, interval time series, and the structured event trace.
//!
//! Every recorded event updates the per-point counters; points the scenario
//! observes also feed a bucketed time series. With tracing enabled each event
//! is serialized as one line with a fixed key order, so two runs are
//! comparable byte-for-byte.

use crate::sim::SimTime;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Enqueue,
    Dequeue,
    Drop,
    LinkTx,
    LinkRx,
    TableHit,
    TableMiss,
    AppTx,
    SinkRx,
}

impl TraceKind {
    pub fn label(self) -> &'static str {
        match self {
            TraceKind::Enqueue => "enqueue",
            TraceKind::Dequeue => "dequeue",
            TraceKind::Drop => "drop",
            TraceKind::LinkTx => "link_tx",
            TraceKind::LinkRx => "link_rx",
            TraceKind::TableHit => "table_hit",
            TraceKind::TableMiss => "table_miss",
            TraceKind::AppTx => "app_tx",
            TraceKind::SinkRx => "sink_rx",
        }
    }
}

/// One trace record. `detail` keys follow the documented per-kind order:
/// enqueue `label_ns`; dequeue `label_ns enq_ns delta_ns itype ingress_ns`;
/// drop `cause`; link_tx/link_rx `bytes`; app_tx/sink_rx `bytes payload
/// dport`; table_hit `itype action`; table_miss `itype`.
#[derive(Clone, Debug)]
pub struct TraceEvent {
    pub t: SimTime,
    pub kind: TraceKind,
    pub point: String,
    pub pkt: u64,
    pub detail: Vec<(&'static str, String)>,
}

impl TraceEvent {
    pub fn detail_u64(&self, key: &str) -> Option<u64> {
        self.detail
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.parse().ok())
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
    }

    fn render(&self, out: &mut String) {
        let _ = write!(
            out,
            "t={} kind={} point={} pkt={}",
            self.t.as_nanos(),
            self.kind.label(),
            self.point,
            self.pkt
        );
        for (k, v) in &self.detail {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
    }
}

/// Per-point totals, split by event kind; drops split again by cause.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointCounters {
    /// kind label (or `drop.<cause>`) → (packets, bytes).
    pub by_kind: BTreeMap<String, (u64, u64)>,
}

impl PointCounters {
    pub fn packets(&self, kind: &str) -> u64 {
        self.by_kind.get(kind).map_or(0, |v| v.0)
    }

    pub fn bytes(&self, kind: &str) -> u64 {
        self.by_kind.get(kind).map_or(0, |v| v.1)
    }
}

/// Bucketed (packets, bytes) series; bucket k covers [k·interval, (k+1)·interval).
#[derive(Clone, Debug, Default)]
pub struct Series {
    pub buckets: Vec<(u64, u64)>,
}

pub struct Recorder {
    pub interval: SimTime,
    counters: BTreeMap<String, PointCounters>,
    series: BTreeMap<String, Series>,
    observed: BTreeSet<String>,
    trace: Option<BufWriter<File>>,
    line_buf: String,
    keep_events: bool,
    pub events: Vec<TraceEvent>,
}

impl Recorder {
    pub fn new(interval: SimTime) -> Recorder {
        assert!(interval > SimTime::ZERO, "series interval must be positive");
        Recorder {
            interval,
            counters: BTreeMap::new(),
            series: BTreeMap::new(),
            observed: BTreeSet::new(),
            trace: None,
            line_buf: String::new(),
            keep_events: false,
            events: Vec::new(),
        }
    }

    /// Marks a point for time-series collection.
    pub fn observe(&mut self, point: &str) {
        self.observed.insert(point.to_string());
        self.series.entry(point.to_string()).or_default();
    }

    pub fn trace_to(&mut self, path: &Path) -> io::Result<()> {
        self.trace = Some(BufWriter::new(File::create(path)?));
        Ok(())
    }

    /// Retain events in memory (test support; traces of long runs are large).
    pub fn keep_events(&mut self, yes: bool) {
        self.keep_events = yes;
    }

    pub fn record(
        &mut self,
        t: SimTime,
        kind: TraceKind,
        point: &str,
        pkt: u64,
        bytes: u64,
        detail: &[(&'static str, String)],
    ) {
        let counter_key = if kind == TraceKind::Drop {
            let cause = detail
                .iter()
                .find(|(k, _)| *k == "cause")
                .map(|(_, v)| v.as_str())
                .unwrap_or("unknown");
            format!("drop.{cause}")
        } else {
            kind.label().to_string()
        };
        let slot = self
            .counters
            .entry(point.to_string())
            .or_default()
            .by_kind
            .entry(counter_key)
            .or_insert((0, 0));
        slot.0 += 1;
        slot.1 += bytes;

        if series_kind_for(point) == Some(kind) && self.observed.contains(point) {
            let idx = (t.as_nanos() / self.interval.as_nanos()) as usize;
            let s = self.series.get_mut(point).expect("observed points have series");
            if s.buckets.len() <= idx {
                s.buckets.resize(idx + 1, (0, 0));
            }
            s.buckets[idx].0 += 1;
            s.buckets[idx].1 += bytes;
        }

        if self.trace.is_some() || self.keep_events {
            let ev = TraceEvent {
                t,
                kind,
                point: point.to_string(),
                pkt,
                detail: detail.to_vec(),
            };
            if let Some(w) = &mut self.trace {
                self.line_buf.clear();
                ev.render(&mut self.line_buf);
                w.write_all(self.line_buf.as_bytes()).expect("trace write");
            }
            if self.keep_events {
                self.events.push(ev);
            }
        }
    }

    pub fn counters(&self) -> &BTreeMap<String, PointCounters> {
        &self.counters
    }

    pub fn point(&self, id: &str) -> PointCounters {
        self.counters.get(id).cloned().unwrap_or_default()
    }

    pub fn series(&self) -> &BTreeMap<String, Series> {
        &self.series
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if let Some(w) = &mut self.trace {
            w.flush()?;
        }
        Ok(())
    }
}

/// The event kind a point's time series tracks, chosen by the point family.
pub fn series_kind_for(point: &str) -> Option<TraceKind> {
    let prefix = point.split(':').next().unwrap_or("");
    match prefix {
        "link" => Some(TraceKind::LinkTx),
        "queue" => Some(TraceKind::Dequeue),
        "host" => Some(TraceKind::AppTx),
        "sink" => Some(TraceKind::SinkRx),
        _ => None,
    }
}

/// Byte-compares two trace files; `Ok(None)` when identical, else the first
/// differing line number (1-based) with both lines.
pub fn trace_diff(a: &Path, b: &Path) -> io::Result<Option<(usize, String, String)>> {
    let ta = std::fs::read_to_string(a)?;
    let tb = std::fs::read_to_string(b)?;
    if ta == tb {
        return Ok(None);
    }
    let mut la = ta.lines();
    let mut lb = tb.lines();
    let mut n = 0;
    loop {
        n += 1;
        match (la.next(), lb.next()) {
            (None, None) => return Ok(Some((n, String::new(), String::new()))),
            (x, y) if x != y => {
                return Ok(Some((
                    n,
                    x.unwrap_or("<eof>").to_string(),
                    y.unwrap_or("<eof>").to_string(),
                )))
            }
            _ => {}
        }
    }
}
