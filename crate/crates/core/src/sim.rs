//! Virtual clock, event queue and seeded random substreams.
//!
//! Events are totally ordered by `(time, seq)`; `seq` is the insertion
//! counter, so two events scheduled for the same instant are dequeued in the
//! order they were scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::replica::ReplicaId;

/// Simulated seconds.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn from_secs(secs: f64) -> Self {
        debug_assert!(secs.is_finite(), "non-finite simulated time {secs}");
        SimTime(secs)
    }

    pub fn as_secs(self) -> f64 {
        self.0
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl PartialEq for SimTime {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: f64) -> SimTime {
        SimTime::from_secs(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;
    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Index into the run's arrival list.
    RequestArrival(usize),
    IterationComplete(ReplicaId),
    AutoscaleTick,
    LogTick,
    /// Closed-loop slot refill.
    WorkloadRefill,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    now: SimTime,
    next_seq: u64,
    dequeued: u64,
    heap: BinaryHeap<Event>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events dequeued so far.
    pub fn dequeued(&self) -> u64 {
        self.dequeued
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64> {
        if time < self.now {
            return Err(SimError::Causality {
                now: self.now,
                event: time,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        Ok(seq)
    }

    /// Dequeues the earliest event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<Event> {
        let event = self.heap.pop()?;
        debug_assert!(event.time >= self.now);
        self.now = event.time;
        self.dequeued += 1;
        Some(event)
    }
}

/// Named random substreams. Each is an independent ChaCha stream keyed by
/// the run seed, so draws on one never shift another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Substream {
    Arrivals,
    Lengths,
    Policy,
    Bootstrap,
}

impl Substream {
    pub const ALL: [Substream; 4] = [
        Substream::Arrivals,
        Substream::Lengths,
        Substream::Policy,
        Substream::Bootstrap,
    ];

    fn index(self) -> usize {
        match self {
            Substream::Arrivals => 0,
            Substream::Lengths => 1,
            Substream::Policy => 2,
            Substream::Bootstrap => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Substream::Arrivals => "arrivals",
            Substream::Lengths => "lengths",
            Substream::Policy => "policy",
            Substream::Bootstrap => "bootstrap",
        }
    }
}

impl FromStr for Substream {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Substream::ALL
            .into_iter()
            .find(|sub| sub.name() == s)
            .ok_or_else(|| SimError::UnknownSubstream(s.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct SimRng {
    seed: u64,
    streams: [ChaCha8Rng; 4],
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        let streams = Substream::ALL.map(|sub| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(sub.index() as u64 + 1);
            rng
        });
        Self { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, sub: Substream) -> &mut ChaCha8Rng {
        &mut self.streams[sub.index()]
    }

    /// Takes a stream out by value, e.g. to hand it to a policy.
    pub fn fork(&self, sub: Substream) -> ChaCha8Rng {
        self.streams[sub.index()].clone()
    }

    pub fn next_seed(&mut self, name: &str) -> Result<u64> {
        let sub: Substream = name.parse()?;
        Ok(self.stream(sub).next_u64())
    }
}
