//! Deterministic randomness.
//!
//! Every random decision of a run (refill sampling, worker pairing, chunk
//! selection) is drawn from a ChaCha8 stream keyed by the run seed. ChaCha
//! exposes a 64-bit stream selector, so each `(generation, agent)` pair owns
//! its own stream: the selector is `generation << 32 | agent.index`. The
//! controller's per-generation stream uses the reserved index `u32::MAX`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::AgentId;

const CONTROLLER_INDEX: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn with_stream(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, inner }
    }

    /// Child stream owned by one agent in one generation. Independent of how
    /// much the parent stream has been consumed.
    pub fn derive_stream(&self, generation: u32, agent: AgentId) -> Self {
        self.with_stream(((generation as u64) << 32) | agent.index as u64)
    }

    /// Stream for controller-level draws (refill, pairing) of a generation.
    pub fn controller_stream(&self, generation: u32) -> Self {
        self.with_stream(((generation as u64) << 32) | CONTROLLER_INDEX as u64)
    }

    /// A uniform draw in `[0, 1)` built from the top 53 bits of one `u64`.
    /// Always consumes exactly one draw.
    pub fn next_unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli trial that consumes a draw even for `p = 0` or `p = 1`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_unit() < p
    }

    /// Uniform index in `0..len` as `floor(next_unit() * len)`; one draw.
    /// The bias from the 53-bit grid is below 2^-53 · len.
    pub fn index(&mut self, len: usize) -> usize {
        assert!(len > 0, "index of an empty range");
        ((self.next_unit() * len as f64) as usize).min(len - 1)
    }

    /// Fisher-Yates shuffle drawing `index(i + 1)` for `i` from the end down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    // First draw of seed 0, generation 0, agent 000-000. Frozen from the
    // ChaCha8 reference output; changing the derivation scheme breaks it.
    const GOLDEN_FIRST_DRAW: u64 = 0xb585_f767_a79a_3b6c;

    #[test]
    fn same_key_same_stream() {
        let root = SeededRng::new(42);
        let a = AgentId::new(3, 5);
        let mut x = root.derive_stream(3, a);
        let mut y = root.derive_stream(3, a);
        for _ in 0..32 {
            assert_eq!(x.next_u64(), y.next_u64());
        }
    }

    #[test]
    fn derivation_ignores_parent_consumption() {
        let mut root = SeededRng::new(9);
        let a = AgentId::new(0, 1);
        let before = root.derive_stream(0, a).next_u64();
        root.next_u64();
        root.next_u64();
        assert_eq!(root.derive_stream(0, a).next_u64(), before);
    }

    #[test]
    fn distinct_agents_have_distinct_streams() {
        let root = SeededRng::new(1234);
        let mut seen = HashSet::new();
        for i in 0..1000u32 {
            let mut s = root.derive_stream(0, AgentId::new(0, i));
            let seq: Vec<u64> = (0..4).map(|_| s.next_u64()).collect();
            assert!(seen.insert(seq), "collision at agent {i}");
        }
        let mut c = root.controller_stream(0);
        let mut a0 = root.derive_stream(0, AgentId::new(0, 0));
        assert_ne!(c.next_u64(), a0.next_u64());
    }

    #[test]
    fn golden_reference_draw() {
        let mut s = SeededRng::new(0).derive_stream(0, AgentId::new(0, 0));
        assert_eq!(s.next_u64(), GOLDEN_FIRST_DRAW);
    }

    #[test]
    fn index_and_shuffle_follow_the_unit_draws() {
        let root = SeededRng::new(77);
        let mut a = root.controller_stream(2);
        let mut raw = root.controller_stream(2);
        for len in [1usize, 2, 3, 10, 1000] {
            let u = (raw.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            assert_eq!(a.index(len), (u * len as f64).floor() as usize);
        }
        let mut v: Vec<u32> = (0..20).collect();
        root.controller_stream(3).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn bernoulli_extremes_consume_draws() {
        let root = SeededRng::new(5);
        let mut a = root.controller_stream(1);
        let mut b = root.controller_stream(1);
        assert!(a.bernoulli(1.0));
        assert!(!a.bernoulli(0.0));
        b.next_u64();
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
