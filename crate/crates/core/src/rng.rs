//! Deterministic random streams.
//!
//! Every logical actor in a run (each worker, the availability sampler, the
//! latency sampler, ...) owns its own ChaCha stream derived from the master
//! seed and a stable label. Adding or removing one actor therefore never
//! shifts the draws seen by another, which is what makes trace-level
//! reproducibility and paired A/B runs (with/without Byzantine workers)
//! possible.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A seeded, label-derived random stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetRng {
    inner: ChaCha12Rng,
}

impl DetRng {
    /// Derive the stream `(label, index)` from a master seed.
    pub fn stream(seed: u64, label: &str, index: u64) -> Self {
        let mut state = seed ^ fnv1a(label.as_bytes()) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        DetRng {
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform01() * (hi - lo)
    }

    /// Bernoulli draw; `p` is clamped to `[0, 1]`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    /// Uniform index in `[0, n)`.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let idx = (self.uniform01() * n as f64) as usize;
        idx.min(n - 1)
    }
}
