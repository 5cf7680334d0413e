use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::model::{ClassifierBlock, FeatureBlock, PartitionedModel};
use crate::profiler::ClientProfile;
use crate::ClientId;

/// What a client sends to the federator at the end of its work.
#[derive(Debug, Clone, PartialEq)]
pub enum Submission {
    /// A fully trained local model.
    Full(PartitionedModel),
    /// The classifier block of a client that offloaded its feature block.
    Classifier(ClassifierBlock),
    /// A feature block trained on a weak client's behalf.
    OffloadedFeature(FeatureBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    RoundStart,
    ProfileReport {
        client: ClientId,
        profile: ClientProfile,
    },
    ScheduleDispatch,
    OffloadHandoff {
        weak: ClientId,
        strong: ClientId,
        feature: FeatureBlock,
        classifier: ClassifierBlock,
        batches: usize,
    },
    ModelSubmit {
        /// Client whose model this belongs to.
        owner: ClientId,
        /// Client that sent it.
        sender: ClientId,
        payload: Submission,
    },
    RoundEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    /// Round the event belongs to; events from other rounds are stale.
    pub round: usize,
    pub kind: EventKind,
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// Future event set ordered by `(time, insertion sequence)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current virtual time: the timestamp of the last popped event.
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `kind` at `time`. Times in the past are clamped to now.
    pub fn push(&mut self, time: f64, round: usize, kind: EventKind) {
        debug_assert!(time.is_finite(), "event time must be finite");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event {
            time: time.max(self.now),
            seq,
            round,
            kind,
        });
    }

    pub fn pop(&mut self) -> Option<Event> {
        let event = self.heap.pop()?;
        debug_assert!(event.time >= self.now);
        self.now = event.time;
        Some(event)
    }

    /// Removes every pending event without advancing the clock.
    pub fn drain(&mut self) -> Vec<Event> {
        let mut events = std::mem::take(&mut self.heap).into_sorted_vec();
        events.reverse();
        events
    }
}
