//! Deterministic discrete-event core: virtual clock, event heap, seeded randomness.
//!
//! Virtual time is an integer nanosecond count. All interval math is done on
//! integers so that two runs with the same seed replay the same event sequence
//! bit for bit. Arithmetic that would overflow the clock is a logic bug and
//! panics rather than wrapping.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// A point on (or a span of) the virtual timeline, in nanoseconds.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(n: u64) -> SimTime {
        SimTime(n)
    }

    pub fn from_micros(us: u64) -> SimTime {
        SimTime(us.checked_mul(1_000).expect("virtual time overflow"))
    }

    pub fn from_millis(ms: u64) -> SimTime {
        SimTime(ms.checked_mul(1_000_000).expect("virtual time overflow"))
    }

    pub fn from_secs(s: u64) -> SimTime {
        SimTime(s.checked_mul(NANOS_PER_SEC).expect("virtual time overflow"))
    }

    /// Rounds to the nearest nanosecond. Panics on negative or non-finite input.
    pub fn from_secs_f64(s: f64) -> SimTime {
        assert!(s.is_finite() && s >= 0.0, "invalid time in seconds: {s}");
        let ns = (s * NANOS_PER_SEC as f64).round();
        assert!(ns <= u64::MAX as f64, "virtual time overflow");
        SimTime(ns as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

}

impl std::ops::Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, k: u64) -> SimTime {
        SimTime(self.0.checked_mul(k).expect("virtual time overflow"))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("virtual time overflow"))
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        self.0
            .checked_sub(rhs.0)
            .map(SimTime)
            .expect("virtual time underflow")
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Nanoseconds between service slots at `rate` events per second, rounded to
/// the nearest nanosecond and never below 1ns so time always advances.
pub fn rate_interval(rate_pps: u64) -> SimTime {
    assert!(rate_pps > 0, "rate must be positive");
    let ns = (NANOS_PER_SEC + rate_pps / 2) / rate_pps;
    SimTime(ns.max(1))
}

/// Handle for a scheduled event; cancellation is lazy (the heap entry is
/// skipped when popped).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EventHandle(u64);

/// An event envelope. `seq` breaks ties so equal-time events fire in the exact
/// order they were scheduled.
#[derive(Debug)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct HeapEntry<P> {
    fire_at: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for HeapEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl<P> Eq for HeapEntry<P> {}

impl<P> Ord for HeapEntry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest (time, seq) first.
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}
impl<P> PartialOrd for HeapEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub events_processed: u64,
    pub final_time: SimTime,
}

/// Event scheduler and virtual clock.
pub struct Scheduler<P> {
    now: SimTime,
    heap: BinaryHeap<HeapEntry<P>>,
    next_seq: u64,
    cancelled: HashSet<u64>,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            heap: BinaryHeap::new(),
            next_seq: 0,
            cancelled: HashSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    /// Schedules `payload` at `at`. Scheduling in the past is a logic bug.
    pub fn schedule(&mut self, at: SimTime, payload: P) -> EventHandle {
        assert!(
            at >= self.now,
            "schedule in the past: at={at:?} now={:?}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(HeapEntry {
            fire_at: at,
            seq,
            payload,
        });
        EventHandle(seq)
    }

    pub fn cancel(&mut self, h: EventHandle) {
        self.cancelled.insert(h.0);
    }

    /// Processes every event with `fire_at <= end` in (time, seq) order, then
    /// leaves the clock exactly at `end`.
    pub fn run_until<W>(
        &mut self,
        end: SimTime,
        world: &mut W,
        mut dispatch: impl FnMut(&mut W, &mut Scheduler<P>, Event<P>),
    ) -> RunSummary {
        assert!(end >= self.now, "run_until target precedes the clock");
        let mut processed = 0u64;
        loop {
            match self.heap.peek() {
                Some(top) if top.fire_at <= end => {}
                _ => break,
            }
            let entry = self.heap.pop().unwrap();
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.fire_at >= self.now, "clock went backwards");
            self.now = entry.fire_at;
            processed += 1;
            dispatch(
                world,
                self,
                Event {
                    fire_at: entry.fire_at,
                    seq: entry.seq,
                    payload: entry.payload,
                },
            );
        }
        self.now = end;
        RunSummary {
            events_processed: processed,
            final_time: end,
        }
    }
}

/// FNV-1a, used to derive stable per-name sub-seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic random stream derived from a run seed and a component label.
/// The same (seed, stream, draw index) always yields the same value, on any
/// platform, so per-component streams stay independent of scheduling order.
pub struct SeededRng {
    rng: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: &str) -> SeededRng {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a64(stream_id.as_bytes()));
        SeededRng { rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in (0, 1]; never zero, so it is safe to feed through ln().
    pub fn uniform_unit(&mut self) -> f64 {
        let x = self.rng.next_u64() >> 11; // 53 bits
        (x + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponentially distributed duration in seconds with the given mean.
    pub fn exponential(&mut self, mean_secs: f64) -> f64 {
        exp_from_uniform(self.uniform_unit(), mean_secs)
    }
}

/// Inverse-transform sample: u in (0, 1] maps to -mean * ln(u).
pub fn exp_from_uniform(u: f64, mean_secs: f64) -> f64 {
    assert!(mean_secs > 0.0, "exponential mean must be positive");
    assert!(u > 0.0 && u <= 1.0, "uniform draw out of range");
    -mean_secs * u.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_constructors_agree() {
        assert_eq!(SimTime::from_secs(1).as_nanos(), 1_000_000_000);
        assert_eq!(SimTime::from_millis(5).as_nanos(), 5_000_000);
        assert_eq!(SimTime::from_micros(7).as_nanos(), 7_000);
        assert_eq!(SimTime::from_secs_f64(2.5).as_nanos(), 2_500_000_000);
    }

    #[test]
    #[should_panic(expected = "overflow")]
    fn time_overflow_is_fatal() {
        let _ = SimTime::from_nanos(u64::MAX) + SimTime::from_nanos(1);
    }

    #[test]
    fn rate_interval_rounds_to_nearest() {
        assert_eq!(rate_interval(1_000).as_nanos(), 1_000_000);
        assert_eq!(rate_interval(1_000_000).as_nanos(), 1_000);
        // 1e9 / 3 = 333333333.3 -> rounds down
        assert_eq!(rate_interval(3).as_nanos(), 333_333_333);
        // 1e9 / 7 = 142857142.857 -> rounds up
        assert_eq!(rate_interval(7).as_nanos(), 142_857_143);
        // Faster than 1 per ns still advances time.
        assert_eq!(rate_interval(3_000_000_000).as_nanos(), 1);
    }

    #[test]
    fn events_fire_in_time_then_seq_order() {
        let mut sched: Scheduler<u32> = Scheduler::new();
        sched.schedule(SimTime::from_nanos(50), 1);
        sched.schedule(SimTime::from_nanos(10), 2);
        sched.schedule(SimTime::from_nanos(50), 3);
        sched.schedule(SimTime::from_nanos(10), 4);
        let mut order = Vec::new();
        let summary = sched.run_until(SimTime::from_nanos(100), &mut order, |o, _, ev| {
            o.push(ev.payload)
        });
        assert_eq!(order, vec![2, 4, 1, 3]);
        assert_eq!(summary.events_processed, 4);
        assert_eq!(summary.final_time, SimTime::from_nanos(100));
    }

    #[test]
    fn run_until_is_inclusive_and_clamps_clock() {
        let mut sched: Scheduler<u32> = Scheduler::new();
        sched.schedule(SimTime::from_nanos(1), 1);
        sched.schedule(SimTime::from_nanos(2), 2);
        sched.schedule(SimTime::from_nanos(3), 3);
        let mut seen = Vec::new();
        let summary = sched.run_until(SimTime::from_nanos(2), &mut seen, |o, _, ev| {
            o.push(ev.payload)
        });
        assert_eq!(seen, vec![1, 2]);
        assert_eq!(summary.events_processed, 2);
        assert_eq!(sched.now(), SimTime::from_nanos(2));

        // The 3ns event is still pending and fires on the next window.
        let summary = sched.run_until(SimTime::from_nanos(10), &mut seen, |o, _, ev| {
            o.push(ev.payload)
        });
        assert_eq!(seen, vec![1, 2, 3]);
        assert_eq!(summary.events_processed, 1);
    }

    #[test]
    fn empty_queue_terminates_at_end() {
        let mut sched: Scheduler<u32> = Scheduler::new();
        let summary = sched.run_until(SimTime::from_secs(1), &mut (), |_, _, _| {});
        assert_eq!(summary.events_processed, 0);
        assert_eq!(summary.final_time, SimTime::from_secs(1));
        assert_eq!(sched.now(), SimTime::from_secs(1));
    }

    #[test]
    #[should_panic(expected = "schedule in the past")]
    fn schedule_in_past_is_fatal() {
        let mut sched: Scheduler<u32> = Scheduler::new();
        sched.schedule(SimTime::from_nanos(5), 1);
        sched.run_until(SimTime::from_nanos(5), &mut (), |_, s, _| {
            s.schedule(SimTime::from_nanos(4), 9);
        });
    }

    #[test]
    fn cancelled_events_do_not_fire_or_count() {
        let mut sched: Scheduler<u32> = Scheduler::new();
        let _a = sched.schedule(SimTime::from_nanos(1), 1);
        let b = sched.schedule(SimTime::from_nanos(2), 2);
        sched.cancel(b);
        let mut seen = Vec::new();
        let summary = sched.run_until(SimTime::from_nanos(5), &mut seen, |o, _, ev| {
            o.push(ev.payload)
        });
        assert_eq!(seen, vec![1]);
        assert_eq!(summary.events_processed, 1);
    }

    #[test]
    fn schedule_at_now_fires_later_in_same_instant() {
        let mut sched: Scheduler<u32> = Scheduler::new();
        sched.schedule(SimTime::from_nanos(5), 1);
        let mut seen = Vec::new();
        sched.run_until(SimTime::from_nanos(5), &mut seen, |o, s, ev| {
            o.push(ev.payload);
            if ev.payload == 1 {
                s.schedule(SimTime::from_nanos(5), 2);
            }
        });
        assert_eq!(seen, vec![1, 2]);
    }

    #[test]
    fn seeded_rng_streams_are_reproducible_and_independent() {
        let mut a1 = SeededRng::new(42, "app:h1:0");
        let mut a2 = SeededRng::new(42, "app:h1:0");
        let mut b = SeededRng::new(42, "app:h2:0");
        let s1: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let s2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let s3: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
    }

    #[test]
    fn exp_inverse_transform_known_value() {
        // u = 0.5, mean = 2  ->  -2 ln 0.5 = 1.386294...
        let v = exp_from_uniform(0.5, 2.0);
        assert!((v - 1.3862943611198906).abs() < 1e-12, "{v}");
    }

    #[test]
    fn exp_sample_mean_close_to_parameter() {
        let mut rng = SeededRng::new(7, "exp-test");
        let n = 10_000;
        let sum: f64 = (0..n).map(|_| rng.exponential(1.0)).sum();
        let mean = sum / n as f64;
        assert!((0.97..=1.03).contains(&mean), "sample mean {mean}");
    }
}
