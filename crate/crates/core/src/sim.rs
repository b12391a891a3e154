//! Discrete-event engine primitives: virtual clock, ordered event queue,
//! seeded random streams and the trace log.
//!
//! Time is kept in integer milliseconds. Events scheduled for the same
//! instant fire in insertion order, so a run is a pure function of its
//! configuration and seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};

/// Virtual time in milliseconds since the start of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(secs: u64) -> Self {
        SimTime(secs * 1000)
    }

    pub fn millis(self) -> u64 {
        self.0
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, delay_ms: u64) -> SimTime {
        SimTime(self.0 + delay_ms)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Handle returned by [`EventQueue::schedule`]; doubles as the tie-break sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug)]
pub struct Scheduled<P> {
    pub fire_at: SimTime,
    pub id: EventId,
    pub payload: P,
}

impl<P> PartialEq for Scheduled<P> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.id == other.id
    }
}

impl<P> Eq for Scheduled<P> {}

impl<P> Ord for Scheduled<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.id).cmp(&(self.fire_at, self.id))
    }
}

impl<P> PartialOrd for Scheduled<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue of events keyed by `(fire_at, seq)` plus the virtual clock.
#[derive(Debug)]
pub struct EventQueue<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Scheduled<P>>,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueue `payload` to fire `delay_ms` after the current time.
    pub fn schedule(&mut self, delay_ms: u64, payload: P) -> EventId {
        let id = EventId(self.next_seq);
        self.next_seq += 1;
        self.heap.push(Scheduled {
            fire_at: self.now + delay_ms,
            id,
            payload,
        });
        id
    }

    /// Pops the next event if it fires at or before `end`, advancing the clock to it.
    pub fn pop_due(&mut self, end: SimTime) -> Option<Scheduled<P>> {
        match self.heap.peek() {
            Some(top) if top.fire_at <= end => {
                let ev = self.heap.pop().expect("peeked");
                debug_assert!(ev.fire_at >= self.now, "causality violated");
                self.now = ev.fire_at;
                Some(ev)
            }
            _ => None,
        }
    }

    /// Moves the clock forward to `end` without processing anything.
    pub fn advance_to(&mut self, end: SimTime) {
        if end > self.now {
            self.now = end;
        }
    }
}

/// Counters describing a completed `run_until` call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSummary {
    pub events_processed: u64,
    pub final_time: SimTime,
    /// FNV-1a digest over every processed event's `(time, kind, from, to)`.
    pub digest: u64,
}

impl TraceSummary {
    pub fn record(&mut self, time: SimTime, kind: &str, from: Option<u64>, to: Option<u64>) {
        self.events_processed += 1;
        let mut h = if self.digest == 0 { FNV_OFFSET } else { self.digest };
        for b in time.0.to_le_bytes() {
            h = fnv_step(h, b);
        }
        for b in kind.bytes() {
            h = fnv_step(h, b);
        }
        for b in from.unwrap_or(u64::MAX).to_le_bytes() {
            h = fnv_step(h, b);
        }
        for b in to.unwrap_or(u64::MAX).to_le_bytes() {
            h = fnv_step(h, b);
        }
        self.digest = h;
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv_step(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
}

/// Drains every event due at or before `end`, in `(fire_at, seq)` order, then
/// parks the clock at `end`.
pub fn run_until<P, F>(queue: &mut EventQueue<P>, end: SimTime, mut handle: F) -> TraceSummary
where
    F: FnMut(&mut EventQueue<P>, SimTime, P),
{
    assert!(end >= queue.now(), "run_until: end is in the past");
    let mut summary = TraceSummary::default();
    while let Some(ev) = queue.pop_due(end) {
        summary.record(ev.fire_at, "event", None, None);
        handle(queue, ev.fire_at, ev.payload);
    }
    queue.advance_to(end);
    summary.final_time = queue.now();
    summary
}

/// Independent random sub-streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Topology = 1,
    Churn = 2,
    Scheduling = 3,
    Latency = 4,
    Markers = 5,
    Adversary = 6,
}

pub type SimRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Poisson draw with the given mean.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    assert!(mean > 0.0, "poisson mean must be positive");
    let dist = Poisson::new(mean).expect("valid poisson mean");
    let k: f64 = dist.sample(rng);
    k as u64
}

/// Exponential inter-arrival time in whole milliseconds, never below 1.
pub fn sample_exponential<R: Rng + ?Sized>(rng: &mut R, mean_ms: f64) -> u64 {
    assert!(mean_ms > 0.0, "exponential mean must be positive");
    let dist = Exp::new(1.0 / mean_ms).expect("valid rate");
    let x: f64 = dist.sample(rng);
    (x.round() as u64).max(1)
}

/// Tab-separated event log: `time_ms  event_kind  from  to  detail`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLog {
    lines: Vec<String>,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        time: SimTime,
        kind: &str,
        from: Option<u64>,
        to: Option<u64>,
        detail: impl fmt::Display,
    ) {
        let f = from.map_or_else(|| "-".to_string(), |v| v.to_string());
        let t = to.map_or_else(|| "-".to_string(), |v| v.to_string());
        self.lines
            .push(format!("{}\t{}\t{}\t{}\t{}", time.0, kind, f, t, detail));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.lines.len() * 32);
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}
