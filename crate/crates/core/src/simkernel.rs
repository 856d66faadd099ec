//! Deterministic discrete-event core: virtual clock, totally ordered event
//! queue, and per-subsystem random streams.
//!
//! Events fire in `(fire_at, seq)` order where `seq` is the insertion sequence
//! number, so ties at the same tick resolve by scheduling order. Each subsystem
//! draws from its own ChaCha stream; adding draws to one stream never perturbs
//! another.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulation time as a whole number of ticks (1 tick = 1 simulated second).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn plus(self, ticks: u64) -> SimTime {
        SimTime(self.0 + ticks)
    }

    /// Ticks elapsed since `earlier`, None if `earlier` is in the future.
    pub fn since(self, earlier: SimTime) -> Option<u64> {
        self.0.checked_sub(earlier.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

#[derive(Error, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockError {
    #[error("event scheduled at t={at} behind current clock t={now}")]
    SchedulePast { at: SimTime, now: SimTime },
    #[error("run_until target t={target} behind current clock t={now}")]
    RunPast { target: SimTime, now: SimTime },
}

/// Handle returned by [`Kernel::schedule`]; cancels the event if it has not
/// fired yet.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EventHandle(u64);

struct Slot<E> {
    at: SimTime,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Slot<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<E> Eq for Slot<E> {}
impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Slot<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Virtual clock plus event queue. Owns no randomness; pair with [`RngHub`].
pub struct Kernel<E> {
    clock: SimTime,
    heap: BinaryHeap<Reverse<Slot<E>>>,
    live: HashSet<u64>,
    next_seq: u64,
    fired: u64,
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Kernel {
            clock: SimTime::ZERO,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            next_seq: 0,
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Events scheduled but not yet fired or cancelled.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn events_fired(&self) -> u64 {
        self.fired
    }

    pub fn schedule(&mut self, at: SimTime, ev: E) -> Result<EventHandle, ClockError> {
        if at < self.clock {
            return Err(ClockError::SchedulePast {
                at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.heap.push(Reverse(Slot { at, seq, ev }));
        Ok(EventHandle(seq))
    }

    /// Schedule relative to the current clock; cannot land in the past.
    pub fn schedule_in(&mut self, ticks: u64, ev: E) -> EventHandle {
        self.schedule(self.clock.plus(ticks), ev)
            .expect("relative schedule is never in the past")
    }

    /// Cancel a pending event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    /// Pop the next non-cancelled event with `fire_at <= bound`, advancing the
    /// clock to its fire time. Returns None once no due event remains; the
    /// clock is left untouched in that case.
    pub fn pop_due(&mut self, bound: SimTime) -> Option<(SimTime, E)> {
        while let Some(Reverse(slot)) = self.heap.peek() {
            if slot.at > bound {
                return None;
            }
            let Reverse(slot) = self.heap.pop().expect("peeked");
            if self.live.remove(&slot.seq) {
                debug_assert!(slot.at >= self.clock, "clock monotonicity");
                self.clock = slot.at;
                self.fired += 1;
                return Some((slot.at, slot.ev));
            }
        }
        None
    }

    /// Move the clock forward without firing anything; used by drivers that
    /// pop events themselves.
    pub fn advance_clock(&mut self, t: SimTime) -> Result<(), ClockError> {
        if t < self.clock {
            return Err(ClockError::RunPast {
                target: t,
                now: self.clock,
            });
        }
        self.clock = t;
        Ok(())
    }

    /// Fire all events with `fire_at <= t` in order, then set the clock to `t`.
    /// Returns the number of events fired. The handler may schedule further
    /// events, including at the current time.
    pub fn run_until(
        &mut self,
        t: SimTime,
        mut handler: impl FnMut(&mut Self, SimTime, E),
    ) -> Result<u64, ClockError> {
        if t < self.clock {
            return Err(ClockError::RunPast {
                target: t,
                now: self.clock,
            });
        }
        let before = self.fired;
        while let Some((at, ev)) = self.pop_due(t) {
            handler(self, at, ev);
        }
        self.clock = t;
        Ok(self.fired - before)
    }
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Independent random streams, one per subsystem.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RngStream {
    Mobility,
    Workload,
    Faults,
}

const STREAM_COUNT: usize = 3;

/// Seeded bundle of per-subsystem ChaCha generators. Streams share the seed but
/// use distinct stream counters, giving independent sequences.
pub struct RngHub {
    seed: u64,
    streams: [ChaCha8Rng; STREAM_COUNT],
}

impl RngHub {
    pub fn new(seed: u64) -> Self {
        let mk = |idx: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx + 1);
            rng
        };
        RngHub {
            seed,
            streams: [mk(0), mk(1), mk(2)],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, s: RngStream) -> &mut ChaCha8Rng {
        let idx = match s {
            RngStream::Mobility => 0,
            RngStream::Workload => 1,
            RngStream::Faults => 2,
        };
        &mut self.streams[idx]
    }

    /// Uniform draw in [0, 1).
    pub fn draw(&mut self, s: RngStream) -> f64 {
        self.stream(s).gen::<f64>()
    }
}
