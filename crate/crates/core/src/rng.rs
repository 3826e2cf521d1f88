//! Caller-owned deterministic randomness.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ChaCha8 stream seeded from a 64-bit value. ChaCha output is specified
/// independently of platform and word size, so identical seeds give identical
/// decisions everywhere.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, e.g. one per scene or per layer.
    pub fn fork(&mut self, salt: u64) -> Self {
        let s = self.inner.next_u64() ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Self::new(s)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// `amount` distinct values from `0..length`, sorted ascending.
    pub fn sample_sorted(&mut self, length: usize, amount: usize) -> Vec<usize> {
        let mut picked = index::sample(&mut self.inner, length, amount).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
