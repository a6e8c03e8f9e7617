//! Deterministic single-queue discrete-event engine.
//!
//! Time is an integer nanosecond counter. Events scheduled for the same
//! instant are dispatched in insertion order, so a run is a pure function of
//! its inputs and seed.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ns(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Identifier of a simulated node (host, NIC, or any dispatch target).
pub type NodeId = u32;

/// Unique identifier returned by [`Engine::schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

/// Short tag naming the kind of an event body; used by the event log.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct SimEvent<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub payload: E,
}

impl<E> SimEvent<E> {
    pub fn id(&self) -> EventId {
        EventId(self.seq)
    }
}

struct Queued<E>(SimEvent<E>);

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<E> Eq for Queued<E> {}
impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl<E> Queued<E> {
    fn key(&self) -> (SimTime, u64) {
        (self.0.fire_at, self.0.seq)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub dispatched: u64,
    pub pending: u64,
    pub end_time: SimTime,
}

/// Seeded random source. Identical seed and identical draw schedule give an
/// identical draw sequence.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed, keyed by `stream`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mixed = self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        SeededRng::new(mixed)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Shared handle to an event-log writer, so several engines (one per run in
/// a sweep) can append to the same file.
#[derive(Clone)]
pub struct EventLog(Rc<RefCell<Box<dyn Write>>>);

impl EventLog {
    pub fn new(w: Box<dyn Write>) -> Self {
        EventLog(Rc::new(RefCell::new(w)))
    }
}

impl Write for EventLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.borrow_mut().write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.borrow_mut().flush()
    }
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EventLog")
    }
}

impl PartialEq for EventLog {
    fn eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// The event engine. Owns the clock and the queue; dispatch is driven by the
/// owner, either through [`Engine::pop_until`] or [`Engine::run_until`].
pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<E>>>,
    dispatched: u64,
    log: Option<Box<dyn Write>>,
    log_lines: Option<Vec<String>>,
}

impl<E: EventKind> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: EventKind> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            dispatched: 0,
            log: None,
            log_lines: None,
        }
    }

    /// Stream one `time,seq,target,kind` line per dispatch to `sink`.
    pub fn set_log_sink(&mut self, sink: Box<dyn Write>) {
        self.log = Some(sink);
    }

    /// Keep the dispatch log in memory (tests, determinism checks).
    pub fn capture_log(&mut self) {
        self.log_lines = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<String> {
        self.log_lines.take().unwrap_or_default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, delay: u64, target: NodeId, payload: E) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(SimEvent {
            fire_at: self.now + delay,
            seq,
            target,
            payload,
        })));
        EventId(seq)
    }

    pub fn schedule_at(&mut self, at: SimTime, target: NodeId, payload: E) -> EventId {
        assert!(
            at >= self.now,
            "scheduling into the past: {at} < {}",
            self.now
        );
        self.schedule(at.0 - self.now.0, target, payload)
    }

    /// Pops the next event with `fire_at <= limit`, advancing the clock to it.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<SimEvent<E>> {
        match self.queue.peek() {
            Some(Reverse(q)) if q.0.fire_at <= limit => {}
            _ => return None,
        }
        let Reverse(Queued(ev)) = self.queue.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.dispatched += 1;
        if self.log.is_some() || self.log_lines.is_some() {
            let line = format!(
                "{},{},{},{}",
                ev.fire_at.0,
                ev.seq,
                ev.target,
                ev.payload.kind()
            );
            if let Some(sink) = self.log.as_mut() {
                // Log emission is best-effort; a broken sink must not perturb the run.
                let _ = writeln!(sink, "{line}");
            }
            if let Some(lines) = self.log_lines.as_mut() {
                lines.push(line);
            }
        }
        Some(ev)
    }

    /// Moves the clock forward to `limit` once the queue has been drained up to it.
    pub fn advance_to(&mut self, limit: SimTime) {
        if limit > self.now {
            self.now = limit;
        }
    }

    /// Dispatches every event with `fire_at <= limit` through `handler`.
    /// Handlers may schedule further events.
    pub fn run_until<F>(&mut self, limit: SimTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Engine<E>, SimEvent<E>),
    {
        let start = self.dispatched;
        while let Some(ev) = self.pop_until(limit) {
            handler(self, ev);
        }
        self.advance_to(limit);
        RunStats {
            dispatched: self.dispatched - start,
            pending: self.queue.len() as u64,
            end_time: self.now,
        }
    }

    pub fn flush_log(&mut self) {
        if let Some(sink) = self.log.as_mut() {
            let _ = sink.flush();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Tag(u32);
    impl EventKind for Tag {
        fn kind(&self) -> &'static str {
            "tag"
        }
    }

    #[test]
    fn fresh_engine_starts_at_zero() {
        let e: Engine<Tag> = Engine::new();
        assert_eq!(e.now(), SimTime(0));
    }

    #[test]
    fn same_time_events_dispatch_in_insertion_order() {
        let mut e = Engine::new();
        for i in 0..5 {
            e.schedule(0, 0, Tag(i));
        }
        let mut seen = vec![];
        e.run_until(SimTime(10), |_, ev| seen.push(ev.payload.0));
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn earlier_deadline_dispatches_first() {
        let mut e = Engine::new();
        e.schedule(100, 0, Tag(1));
        e.schedule(50, 0, Tag(2));
        let mut seen = vec![];
        e.run_until(SimTime(1000), |_, ev| seen.push(ev.payload.0));
        assert_eq!(seen, vec![2, 1]);
    }

    #[test]
    fn empty_queue_advances_to_limit() {
        let mut e: Engine<Tag> = Engine::new();
        let stats = e.run_until(SimTime(77), |_, _| {});
        assert_eq!(stats.dispatched, 0);
        assert_eq!(e.now(), SimTime(77));
    }

    #[test]
    fn event_beyond_limit_is_kept() {
        let mut e = Engine::new();
        e.schedule(5, 0, Tag(1));
        let stats = e.run_until(SimTime(3), |_, _| panic!("dispatched early"));
        assert_eq!(stats.dispatched, 0);
        assert_eq!(stats.pending, 1);
        assert_eq!(e.now(), SimTime(3));
        let stats = e.run_until(SimTime(5), |_, _| {});
        assert_eq!(stats.dispatched, 1);
    }

    #[test]
    fn now_tracks_last_dispatch() {
        let mut e = Engine::new();
        e.schedule(42, 0, Tag(0));
        let mut at = SimTime(0);
        while let Some(ev) = e.pop_until(SimTime(u64::MAX)) {
            at = ev.fire_at;
        }
        assert_eq!(at, SimTime(42));
        assert_eq!(e.now(), SimTime(42));
    }

    #[test]
    fn handlers_can_schedule_follow_ups() {
        let mut e = Engine::new();
        e.schedule(1, 0, Tag(3));
        let mut count = 0;
        e.run_until(SimTime(100), |eng, ev| {
            count += 1;
            if ev.payload.0 > 0 {
                eng.schedule(10, 0, Tag(ev.payload.0 - 1));
            }
        });
        assert_eq!(count, 4);
    }

    #[test]
    fn log_lines_have_four_fields() {
        let mut e = Engine::new();
        e.capture_log();
        e.schedule(7, 3, Tag(0));
        e.run_until(SimTime(10), |_, _| {});
        assert_eq!(e.take_log(), vec!["7,0,3,tag".to_string()]);
    }

    #[test]
    fn forked_streams_are_stable() {
        let a = SeededRng::new(9).fork(1).next_u64();
        let b = SeededRng::new(9).fork(1).next_u64();
        let c = SeededRng::new(9).fork(2).next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
