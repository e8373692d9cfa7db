//! Seeded random streams.
//!
//! Every perturbation direction in this crate is regenerated from a 64-bit
//! seed, so the generator is pinned:
//!
//! * keystream: ChaCha8 from `rand_chacha` 0.9, keyed by
//!   `SeedableRng::seed_from_u64(seed)`;
//! * normals: the basic Box–Muller transform. Pair `p` of a stream reads the
//!   64-bit keystream words `2p` and `2p + 1`, maps them to
//!   `u1 = (a >> 11 + 1) · 2^-53 ∈ (0, 1]` and `u2 = (b >> 11) · 2^-53 ∈ [0, 1)`,
//!   and yields `r·cos(2πu2)` then `r·sin(2πu2)` with `r = sqrt(-2 ln u1)`.
//!
//! Normal number `k` of a stream therefore depends only on `(seed, k)`, which
//! is what lets [`GaussianStream::seek`] jump straight to a tensor's slice.
//! Seed logs are portable only between builds that keep this generator.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Domain tags for [`derive_seed`].
pub mod domain {
    pub const QUERY: u64 = 0x5155_4552_5953_4545; // "QUERYSEE"
    pub const BATCH: u64 = 0x4241_5443_4853_4545; // "BATCHSEE"
    pub const INIT: u64 = 0x494E_4954_5345_4544; // "INITSEED"
    pub const EPISODE: u64 = 0x4550_4953_4F44_4545; // "EPISODEE"
    pub const DATA: u64 = 0x4441_5441_5345_4544; // "DATASEED"
}

/// SplitMix64 finalizer.
pub fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `mix64(mix64(mix64(master ^ domain) ^ a) ^ b)`.
///
/// Per-query perturbation seeds are `derive_seed(master, domain::QUERY, t, j)`
/// for step `t` and query `j`.
pub fn derive_seed(master: u64, domain: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(master ^ domain) ^ a) ^ b)
}

pub fn query_seed(master: u64, step: u64, query: u64) -> u64 {
    derive_seed(master, domain::QUERY, step, query)
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let u1 = ((a >> 11) + 1) as f64 * TWO_POW_NEG_53;
    let u2 = (b >> 11) as f64 * TWO_POW_NEG_53;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

/// A seekable stream of standard-normal samples.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
    position: u64,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
            position: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index of the next normal this stream will return.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Moves the stream so the next call to [`next_normal`](Self::next_normal)
    /// returns normal number `index`.
    pub fn seek(&mut self, index: u64) {
        let pair = index / 2;
        // Each pair consumes four 32-bit keystream words.
        self.rng.set_word_pos(u128::from(pair) * 4);
        self.spare = None;
        self.position = pair * 2;
        if index % 2 == 1 {
            self.next_normal();
        }
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.position += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let (z0, z1) = box_muller(a, b);
        self.spare = Some(z1);
        z0
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

/// General-purpose seeded generator for data synthesis and initialization.
/// Not seekable; uses the same Box–Muller mapping as [`GaussianStream`].
#[derive(Clone, Debug)]
pub struct DataRng {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl DataRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let (z0, z1) = box_muller(a, b);
        self.spare = Some(z1);
        z0
    }

    /// Uniform integer in `0..n` (multiply-shift; `n` must be nonzero).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.rng.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }
}
