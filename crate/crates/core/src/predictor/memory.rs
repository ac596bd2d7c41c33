//! Bounded FIFO of recent aligned BEV states.

use std::collections::VecDeque;

use crate::ad::Var;
use crate::encoder::BevStateVar;
use crate::gridworld::Pose;

#[derive(Clone, Copy, Debug)]
pub struct MemSlot {
    pub features: Var,
    pub pose: Pose,
    pub timestamp: i32,
}

/// FIFO of at most `cap` states with strictly increasing timestamps;
/// eviction is strictly oldest-first.
#[derive(Clone, Debug)]
pub struct StreamMemory {
    cap: usize,
    slots: VecDeque<MemSlot>,
}

impl StreamMemory {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1, "memory capacity must be >= 1");
        StreamMemory {
            cap,
            slots: VecDeque::with_capacity(cap),
        }
    }

    /// Seeds a memory with encoder states (oldest first).
    pub fn seeded(cap: usize, states: &[BevStateVar]) -> Self {
        let mut mem = Self::new(cap);
        for s in states {
            mem.push(MemSlot {
                features: s.features,
                pose: s.pose,
                timestamp: s.timestamp,
            });
        }
        mem
    }

    pub fn push(&mut self, slot: MemSlot) {
        if let Some(last) = self.slots.back() {
            assert!(
                slot.timestamp > last.timestamp,
                "memory timestamps must strictly increase ({} after {})",
                slot.timestamp,
                last.timestamp
            );
        }
        if self.slots.len() == self.cap {
            self.slots.pop_front();
        }
        self.slots.push_back(slot);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn newest(&self) -> Option<&MemSlot> {
        self.slots.back()
    }

    pub fn slots(&self) -> impl Iterator<Item = &MemSlot> {
        self.slots.iter()
    }

    pub fn timestamps(&self) -> Vec<i32> {
        self.slots.iter().map(|s| s.timestamp).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tape;

    fn slot(tape: &mut Tape, t: i32) -> MemSlot {
        MemSlot {
            features: tape.constant(vec![t as f64], 1, 1),
            pose: Pose {
                pos: [0.0, 0.0],
                heading: [1.0, 0.0],
            },
            timestamp: t,
        }
    }

    #[test]
    fn eviction_is_oldest_first_and_bounded() {
        let mut tape = Tape::inference();
        let mut mem = StreamMemory::new(3);
        for t in 0..5 {
            mem.push(slot(&mut tape, t));
            assert!(mem.len() <= 3);
        }
        assert_eq!(mem.timestamps(), vec![2, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "strictly increase")]
    fn non_increasing_timestamps_panic() {
        let mut tape = Tape::inference();
        let mut mem = StreamMemory::new(3);
        mem.push(slot(&mut tape, 1));
        mem.push(slot(&mut tape, 1));
    }
}
