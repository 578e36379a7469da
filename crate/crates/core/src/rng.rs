//! Deterministic random streams.
//!
//! All randomness in the crate flows through [`Stream`], a PCG-XSL-RR 128/64
//! generator (`rand_pcg::Pcg64`) constructed as `Pcg64::new(state, PCG_STREAM)`
//! where `state` is the 64-bit seed zero-extended to 128 bits and `PCG_STREAM`
//! is the PCG reference default increment. Uniform reals are produced as
//! `(next_u64 >> 11) * 2^-53`, which lies in `[0, 1)`.
//!
//! Sub-streams (per scene, per iteration, per layer) are derived by mixing the
//! parent seed and a key with the SplitMix64 finalizer, so any stream can be
//! reconstructed from `(seed, key)` alone without replaying its parent.

use rand_core::Rng;
use rand_pcg::Pcg64;

/// PCG reference default stream selector.
pub const PCG_STREAM: u128 = 0x0a02_bdbf_7bb3_c0a7_ac28_fa16_a64a_bf96;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of the sub-stream `key` of `seed`.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ key.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

#[derive(Clone, Debug)]
pub struct Stream {
    inner: Pcg64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Pcg64::new(seed as u128, PCG_STREAM),
        }
    }

    pub fn derive(seed: u64, key: u64) -> Self {
        Self::new(derive_seed(seed, key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`. Requires `lo < hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let v = lo + (hi - lo) * self.next_f64();
        // lo + (hi - lo) * u can round up to hi for u close to 1
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
