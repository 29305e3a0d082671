//! Counter-style random streams.
//!
//! Every random draw in the crate comes from a stream addressed by a key
//! `(seed, purpose, a, b, c)`. Keys are hashed into the starting state of a
//! SplitMix64 generator, so a stream can be rebuilt anywhere from its address
//! alone. Work can therefore be split across any number of threads, in any
//! order, without changing a single draw.

use rand::SeedableRng;

/// Generator used for every stream.
pub type StreamRng = rand_xoshiro::SplitMix64;

/// What a stream is used for. Streams with different purposes never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Particle propagation, keyed by (particle, coordinate, step). Step 0 is initialization.
    Propagate = 1,
    /// Multinomial resampling, keyed by step.
    Resample = 2,
    /// Stationary chains for asymptotic-variance estimation, keyed by grid node.
    Chain = 3,
    /// Draws of the limiting ESS variable.
    LimitingEss = 4,
    /// Single-particle trajectory banks for theoretical resampling times.
    Theory = 5,
    /// Threshold jitter.
    Jitter = 6,
    /// Derivation of per-replicate seeds in the experiment harness.
    Replicate = 7,
    /// Free-form streams for callers (tests, examples).
    User = 8,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline(always)]
fn absorb(h: u64, v: u64) -> u64 {
    mix64(h ^ v.wrapping_add(GOLDEN).wrapping_mul(0xff51_afd7_ed55_8ccd))
}

/// Hashes a stream address into a 64-bit key.
#[inline]
pub fn stream_key(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> u64 {
    let h = absorb(mix64(seed.wrapping_add(GOLDEN)), purpose as u64);
    absorb(absorb(absorb(h, a), b), c)
}

/// Builds the stream at the given address.
#[inline]
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, purpose, a, b, c))
}

/// Propagation streams share a prefix per (particle, step); only the
/// coordinate is absorbed in the inner loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowKey(u64);

impl RowKey {
    #[inline]
    pub(crate) fn new(seed: u64, purpose: Purpose, row: u64, step: u64) -> Self {
        let h = absorb(mix64(seed.wrapping_add(GOLDEN)), purpose as u64);
        RowKey(absorb(absorb(h, row), step))
    }

    #[inline(always)]
    pub(crate) fn coordinate(self, coord: u64) -> StreamRng {
        StreamRng::seed_from_u64(absorb(self.0, coord))
    }
}

/// Seed for replicate `r` of an experiment run under `master`.
pub fn replicate_seed(master: u64, r: u64) -> u64 {
    stream_key(master, Purpose::Replicate, r, 0, 0)
}
