//! Discrete-event engine: global clock, ordered event queue and seeded
//! random sub-streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in picoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Tick {
    pub const ZERO: Tick = Tick(0);
    pub const PS_PER_NS: u64 = 1_000;

    pub const fn from_ps(ps: u64) -> Tick {
        Tick(ps)
    }

    pub const fn from_ns(ns: u64) -> Tick {
        Tick(ns * 1_000)
    }

    pub const fn from_us(us: u64) -> Tick {
        Tick(us * 1_000_000)
    }

    pub const fn from_ms(ms: u64) -> Tick {
        Tick(ms * 1_000_000_000)
    }

    /// Converts fractional nanoseconds, rounding to the nearest picosecond.
    pub fn from_ns_f64(ns: f64) -> Tick {
        Tick((ns * 1_000.0).round().max(0.0) as u64)
    }

    /// Duration of `cycles` clock cycles at `freq_hz`, rounded to the nearest tick.
    pub fn from_cycles(cycles: f64, freq_hz: f64) -> Tick {
        Tick((cycles * 1e12 / freq_hz).round().max(0.0) as u64)
    }

    /// Wire time of `bytes` at `gbps` gigabits per second.
    pub fn for_bits(bytes: u64, gbps: f64) -> Tick {
        // bits / Gbps = ns; times 1000 for ps.
        Tick(((bytes * 8) as f64 * 1_000.0 / gbps).round() as u64)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_ns_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn saturating_sub(self, other: Tick) -> Tick {
        Tick(self.0.saturating_sub(other.0))
    }
}

impl Add for Tick {
    type Output = Tick;
    fn add(self, rhs: Tick) -> Tick {
        Tick(self.0 + rhs.0)
    }
}

impl AddAssign for Tick {
    fn add_assign(&mut self, rhs: Tick) {
        self.0 += rhs.0;
    }
}

impl Sub for Tick {
    type Output = Tick;
    fn sub(self, rhs: Tick) -> Tick {
        Tick(self.0 - rhs.0)
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ps", self.0)
    }
}

/// Handle returned by [`Engine::schedule`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClockStats {
    pub events_processed: u64,
    pub final_tick: Tick,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled after engine shutdown (at {0})")]
    Shutdown(Tick),
    #[error("run_until limit {limit} is before current time {now}")]
    TimeTravel { limit: Tick, now: Tick },
}

struct Scheduled<E> {
    fire_at: Tick,
    sequence: u64,
    payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.sequence == other.sequence
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; reverse so the earliest (fire_at, sequence) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// Single-threaded event queue. `E` is the payload type; the owner of the
/// engine dispatches payloads to components.
pub struct Engine<E> {
    now: Tick,
    next_sequence: u64,
    queue: BinaryHeap<Scheduled<E>>,
    events_processed: u64,
    finished: bool,
    seed: u64,
}

impl<E> Engine<E> {
    pub fn new(seed: u64) -> Self {
        Engine {
            now: Tick::ZERO,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            events_processed: 0,
            finished: false,
            seed,
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    /// Fire time of the earliest pending event.
    pub fn peek_time(&self) -> Option<Tick> {
        self.queue.peek().map(|e| e.fire_at)
    }

    /// Enqueue `payload` to fire `delay` after the current time.
    pub fn schedule(&mut self, delay: Tick, payload: E) -> Result<EventId, SimError> {
        self.schedule_at(self.now + delay, payload)
    }

    /// Enqueue at an absolute tick. Ticks in the past are clamped to now.
    pub fn schedule_at(&mut self, at: Tick, payload: E) -> Result<EventId, SimError> {
        if self.finished {
            return Err(SimError::Shutdown(self.now));
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Scheduled {
            fire_at: at.max(self.now),
            sequence,
            payload,
        });
        Ok(EventId(sequence))
    }

    /// Pops the next event if it fires at or before `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: Tick) -> Option<(Tick, E)> {
        match self.queue.peek() {
            Some(ev) if ev.fire_at <= limit => {}
            _ => return None,
        }
        let ev = self.queue.pop()?;
        self.now = ev.fire_at;
        self.events_processed += 1;
        Some((ev.fire_at, ev.payload))
    }

    /// Runs every event with `fire_at <= limit` through `handler`, then sets
    /// the clock to `limit`.
    pub fn run_until<F>(&mut self, limit: Tick, mut handler: F) -> Result<SimClockStats, SimError>
    where
        F: FnMut(&mut Engine<E>, E),
    {
        if limit < self.now {
            return Err(SimError::TimeTravel { limit, now: self.now });
        }
        while let Some((_, payload)) = self.pop_until(limit) {
            handler(self, payload);
        }
        self.now = limit;
        Ok(self.stats())
    }

    /// Moves the clock forward without processing anything. Only valid when
    /// no pending event is earlier than `to`.
    pub fn advance_to(&mut self, to: Tick) {
        debug_assert!(self.queue.peek().is_none_or(|e| e.fire_at >= to));
        self.now = self.now.max(to);
    }

    pub fn stats(&self) -> SimClockStats {
        SimClockStats {
            events_processed: self.events_processed,
            final_tick: self.now,
        }
    }

    /// Stops the engine; further `schedule` calls fail.
    pub fn shutdown(&mut self) -> SimClockStats {
        self.finished = true;
        self.queue.clear();
        self.stats()
    }

    /// Independent random stream for one component, keyed by its id so the
    /// draw sequence does not depend on initialization order.
    pub fn substream(&self, component_id: u64) -> ChaCha8Rng {
        substream(self.seed, component_id)
    }
}

pub fn substream(seed: u64, component_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component_id);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_delay_fires_after_earlier_sequenced_events() {
        let mut eng: Engine<&'static str> = Engine::new(0);
        let mut order = Vec::new();
        eng.schedule(Tick(5), "first").unwrap();
        eng.schedule(Tick(5), "spawner").unwrap();
        eng.schedule(Tick(5), "third").unwrap();
        eng.run_until(Tick(10), |e, p| {
            order.push((e.now(), p));
            if p == "spawner" {
                e.schedule(Tick::ZERO, "child").unwrap();
            }
        })
        .unwrap();
        let names: Vec<_> = order.iter().map(|(_, p)| *p).collect();
        assert_eq!(names, ["first", "spawner", "third", "child"]);
        assert!(order.iter().all(|(t, _)| *t == Tick(5)));
    }

    #[test]
    fn fifo_tie_break() {
        let mut eng = Engine::new(0);
        eng.schedule(Tick(3), 'A').unwrap();
        eng.schedule(Tick(3), 'B').unwrap();
        let mut fired = Vec::new();
        eng.run_until(Tick(3), |_, p| fired.push(p)).unwrap();
        assert_eq!(fired, ['A', 'B']);
    }

    #[test]
    fn delay_from_zero() {
        let mut eng = Engine::new(0);
        eng.schedule(Tick(1000), ()).unwrap();
        let mut at = None;
        eng.run_until(Tick(5000), |e, _| at = Some(e.now())).unwrap();
        assert_eq!(at, Some(Tick(1000)));
    }

    #[test]
    fn empty_queue_run() {
        let mut eng: Engine<()> = Engine::new(0);
        let s = eng.run_until(Tick(100), |_, _| {}).unwrap();
        assert_eq!(s, SimClockStats { events_processed: 0, final_tick: Tick(100) });
    }

    #[test]
    fn limit_cuts_queue() {
        let mut eng = Engine::new(0);
        for t in [10, 20, 30] {
            eng.schedule(Tick(t), t).unwrap();
        }
        let s = eng.run_until(Tick(25), |_, _| {}).unwrap();
        assert_eq!(s.events_processed, 2);
        assert_eq!(s.final_tick, Tick(25));
        assert_eq!(eng.pending(), 1);
    }

    #[test]
    fn schedule_after_shutdown_fails() {
        let mut eng = Engine::new(0);
        eng.shutdown();
        assert_eq!(eng.schedule(Tick(1), ()), Err(SimError::Shutdown(Tick(0))));
    }

    #[test]
    fn run_until_rejects_past_limit() {
        let mut eng: Engine<()> = Engine::new(0);
        eng.run_until(Tick(50), |_, _| {}).unwrap();
        assert!(matches!(eng.run_until(Tick(10), |_, _| {}), Err(SimError::TimeTravel { .. })));
    }

    #[test]
    fn substreams_are_keyed_not_ordered() {
        let a1: u64 = substream(7, 1).gen();
        let _b: u64 = substream(7, 2).gen();
        let a2: u64 = substream(7, 1).gen();
        assert_eq!(a1, a2);
        assert_ne!(a1, substream(7, 2).gen::<u64>());
    }

    #[test]
    fn tick_conversions() {
        assert_eq!(Tick::for_bits(1000, 8.0), Tick::from_us(1));
        assert_eq!(Tick::for_bits(1000, 80.0), Tick::from_ns(100));
        assert_eq!(Tick::from_cycles(2000.0, 2e9), Tick::from_us(1));
    }

    proptest! {
        #[test]
        fn fired_order_is_sorted(delays in proptest::collection::vec(0u64..50, 1..200)) {
            let mut eng = Engine::new(0);
            for (i, d) in delays.iter().enumerate() {
                eng.schedule(Tick(*d), i).unwrap();
            }
            let mut fired = Vec::new();
            eng.run_until(Tick(100), |e, i| {
                // handler always observes its own fire time
                assert_eq!(e.now(), Tick(delays[i]));
                fired.push((delays[i], i));
            }).unwrap();
            let mut sorted = fired.clone();
            sorted.sort();
            prop_assert_eq!(fired, sorted);
        }
    }
}
