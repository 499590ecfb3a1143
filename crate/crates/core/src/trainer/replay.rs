//! Fixed-capacity experience ring with uniform sampling.

use crate::envs::Transition;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, storage: Vec::new(), cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// FIFO eviction once full.
    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `k` uniform draws with replacement over the filled slots.
    pub fn sample(&self, k: usize, rng: &mut ChaCha12Rng) -> Result<Vec<&Transition>> {
        if self.storage.is_empty() {
            return Err(Error::NotReady("replay buffer is empty".into()));
        }
        Ok((0..k).map(|_| &self.storage[rng.random_range(0..self.storage.len())]).collect())
    }

    /// Slots in internal storage order (insertion order while under
    /// capacity).
    pub fn entries(&self) -> &[Transition] {
        &self.storage
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn from_parts(capacity: usize, storage: Vec<Transition>, cursor: usize) -> Result<Self> {
        if storage.len() > capacity || (capacity > 0 && cursor >= capacity.max(1)) {
            return Err(Error::Checkpoint("replay buffer parts inconsistent".into()));
        }
        Ok(Self { capacity, storage, cursor })
    }
}
