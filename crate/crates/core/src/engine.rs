//! Deterministic discrete-event scheduler.
//!
//! Ground truth lives here as integer femtoseconds. Agents never see a
//! [`SimInstant`]; they only see readings of their own clocks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use thiserror::Error;

pub const FS_PER_PS: i64 = 1_000;
pub const FS_PER_NS: i64 = 1_000_000;
pub const FS_PER_US: i64 = 1_000_000_000;
pub const FS_PER_S: i64 = 1_000_000_000_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("event due at {due} is before the current instant {now}")]
    PastEvent { due: SimInstant, now: SimInstant },
    #[error("time arithmetic overflow")]
    Overflow,
}

/// Ground-truth instant, femtoseconds since scenario start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimInstant(i64);

/// Signed ground-truth span in femtoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimDuration(i64);

impl SimInstant {
    pub const ZERO: SimInstant = SimInstant(0);

    pub const fn from_fs(fs: i64) -> Self {
        SimInstant(fs)
    }

    pub fn from_ps(ps: i64) -> Self {
        SimInstant(ps.checked_mul(FS_PER_PS).expect("instant overflow"))
    }

    /// Nearest femtosecond to `secs`.
    pub fn from_secs_f64(secs: f64) -> Self {
        SimInstant((secs * FS_PER_S as f64).round() as i64)
    }

    pub const fn as_fs(self) -> i64 {
        self.0
    }

    pub fn as_ps_f64(self) -> f64 {
        self.0 as f64 / FS_PER_PS as f64
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / FS_PER_S as f64
    }

    pub fn checked_add(self, d: SimDuration) -> Option<SimInstant> {
        self.0.checked_add(d.0).map(SimInstant)
    }

    pub fn checked_sub(self, d: SimDuration) -> Option<SimInstant> {
        self.0.checked_sub(d.0).map(SimInstant)
    }

    pub fn duration_since(self, earlier: SimInstant) -> SimDuration {
        SimDuration(self.0.checked_sub(earlier.0).expect("instant overflow"))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_fs(fs: i64) -> Self {
        SimDuration(fs)
    }

    pub fn from_ps(ps: i64) -> Self {
        SimDuration(ps.checked_mul(FS_PER_PS).expect("duration overflow"))
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimDuration((secs * FS_PER_S as f64).round() as i64)
    }

    pub const fn as_fs(self) -> i64 {
        self.0
    }

    pub fn as_ps_f64(self) -> f64 {
        self.0 as f64 / FS_PER_PS as f64
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / FS_PER_S as f64
    }

    pub fn checked_mul(self, k: i64) -> Option<SimDuration> {
        self.0.checked_mul(k).map(SimDuration)
    }
}

impl Add<SimDuration> for SimInstant {
    type Output = SimInstant;

    fn add(self, rhs: SimDuration) -> SimInstant {
        self.checked_add(rhs).expect("instant overflow")
    }
}

impl Sub<SimDuration> for SimInstant {
    type Output = SimInstant;

    fn sub(self, rhs: SimDuration) -> SimInstant {
        self.checked_sub(rhs).expect("instant overflow")
    }
}

impl Sub for SimInstant {
    type Output = SimDuration;

    fn sub(self, rhs: SimInstant) -> SimDuration {
        self.duration_since(rhs)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;

    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.checked_add(rhs.0).expect("duration overflow"))
    }
}

impl fmt::Display for SimInstant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}fs", self.0)
    }
}

/// A scheduled event. Ordered by `(due, seq)`.
#[derive(Debug, Clone)]
pub struct Event<K> {
    pub due: SimInstant,
    pub seq: u64,
    pub kind: K,
}

impl<K> PartialEq for Event<K> {
    fn eq(&self, other: &Self) -> bool {
        self.due == other.due && self.seq == other.seq
    }
}

impl<K> Eq for Event<K> {}

impl<K> PartialOrd for Event<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Event<K> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

/// Single-threaded event queue with a monotone clock.
#[derive(Debug)]
pub struct Scheduler<K> {
    now: SimInstant,
    next_seq: u64,
    queue: BinaryHeap<Event<K>>,
}

impl<K> Default for Scheduler<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Scheduler<K> {
    pub fn new() -> Self {
        Scheduler {
            now: SimInstant::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimInstant {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, due: SimInstant, kind: K) -> Result<u64, EngineError> {
        if due < self.now {
            return Err(EngineError::PastEvent { due, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq = self.next_seq.checked_add(1).ok_or(EngineError::Overflow)?;
        self.queue.push(Event { due, seq, kind });
        Ok(seq)
    }

    /// Schedules `delay` after the current instant.
    pub fn schedule_in(&mut self, delay: SimDuration, kind: K) -> Result<u64, EngineError> {
        let due = self.now.checked_add(delay).ok_or(EngineError::Overflow)?;
        self.schedule(due, kind)
    }

    /// Executes every event due at or before `until`, in `(due, seq)` order,
    /// then sets `now = until`. The handler may schedule further events;
    /// those falling inside the horizon run in the same call.
    pub fn run_until<F>(&mut self, until: SimInstant, mut handler: F) -> Result<usize, EngineError>
    where
        F: FnMut(&mut Self, Event<K>),
    {
        if until < self.now {
            return Err(EngineError::PastEvent { due: until, now: self.now });
        }
        let mut processed = 0;
        while self.queue.peek().is_some_and(|e| e.due <= until) {
            let event = self.queue.pop().expect("peeked");
            self.now = event.due;
            handler(self, event);
            processed += 1;
        }
        self.now = until;
        Ok(processed)
    }

    /// Drains the queue completely.
    pub fn run_all<F>(&mut self, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Event<K>),
    {
        let mut processed = 0;
        while let Some(event) = self.queue.pop() {
            self.now = event.due;
            handler(self, event);
            processed += 1;
        }
        processed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_due_event_runs_first() {
        let mut s = Scheduler::new();
        s.schedule(SimInstant::from_fs(5), "late").unwrap();
        s.schedule(SimInstant::ZERO, "first").unwrap();
        let mut seen = Vec::new();
        s.run_until(SimInstant::from_fs(10), |_, e| seen.push(e.kind)).unwrap();
        assert_eq!(seen, vec!["first", "late"]);
    }

    #[test]
    fn ties_run_in_insertion_order() {
        let mut s = Scheduler::new();
        for i in 0..5 {
            s.schedule(SimInstant::from_fs(7), i).unwrap();
        }
        let mut seen = Vec::new();
        s.run_all(|_, e| seen.push(e.kind));
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn past_event_rejected() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.run_until(SimInstant::from_fs(10), |_, _| {}).unwrap();
        let err = s.schedule(SimInstant::from_fs(9), ()).unwrap_err();
        assert!(matches!(err, EngineError::PastEvent { .. }));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut s: Scheduler<()> = Scheduler::new();
        let n = s.run_until(SimInstant::from_fs(FS_PER_S), |_, _| {}).unwrap();
        assert_eq!(n, 0);
        assert_eq!(s.now(), SimInstant::from_fs(FS_PER_S));
    }

    #[test]
    fn horizon_is_inclusive() {
        let mut s = Scheduler::new();
        for t in 1..=3 {
            s.schedule(SimInstant::from_fs(t), t).unwrap();
        }
        let n = s.run_until(SimInstant::from_fs(2), |_, _| {}).unwrap();
        assert_eq!(n, 2);
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn handler_can_chain_events() {
        let mut s = Scheduler::new();
        s.schedule(SimInstant::ZERO, 0u32).unwrap();
        let mut order = Vec::new();
        s.run_until(SimInstant::from_fs(100), |sch, e| {
            order.push((sch.now().as_fs(), e.kind));
            if e.kind < 3 {
                sch.schedule_in(SimDuration::from_fs(10), e.kind + 1).unwrap();
            }
        })
        .unwrap();
        assert_eq!(order, vec![(0, 0), (10, 1), (20, 2), (30, 3)]);
    }

    #[test]
    fn now_never_decreases() {
        let mut s = Scheduler::new();
        for t in [9, 3, 3, 7, 1, 8] {
            s.schedule(SimInstant::from_fs(t), ()).unwrap();
        }
        let mut last = SimInstant::ZERO;
        s.run_all(|sch, _| {
            assert!(sch.now() >= last);
            last = sch.now();
        });
    }

    #[test]
    fn overflow_is_checked() {
        let t = SimInstant::from_fs(i64::MAX - 1);
        assert!(t.checked_add(SimDuration::from_fs(10)).is_none());
    }
}
