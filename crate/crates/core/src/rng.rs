//! Seed derivation and the seed-to-sample contract.
//!
//! Seeds are 32-byte values. Child seeds are SHA-256 digests of a domain
//! tag followed by the parent seed and little-endian `u32`/`u64` indices.
//!
//! A seed drives a ChaCha20 stream ([`rand_chacha::ChaCha20Rng::from_seed`]).
//! Gaussian coordinate `k` consumes the 64-bit draws `2k` and `2k + 1`,
//! `a` and `b`, and is
//!
//! ```text
//! u1 = ((a >> 11) + 1) * 2^-53        in (0, 1]
//! u2 = (b >> 11) * 2^-53              in [0, 1)
//! z  = sqrt(-2 ln u1) * cos(2 pi u2)
//! ```
//!
//! so two parties holding the same seed produce bit-identical vectors.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use alloc::vec::Vec;
use core::f64::consts::PI;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// Opaque 256-bit seed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub [u8; 32]);

impl core::fmt::Debug for Seed {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("Seed(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        f.write_str("..)")
    }
}

impl Seed {
    /// Expands a 64-bit value into a full seed.
    pub fn from_u64(v: u64) -> Self {
        derive(b"cordp/u64", &Seed([0; 32]), &[v])
    }

    /// Child seed for `tag` and `indices`.
    pub fn child(&self, tag: &[u8], indices: &[u64]) -> Seed {
        derive(tag, self, indices)
    }

    pub fn stream(&self) -> Stream {
        Stream(ChaCha20Rng::from_seed(self.0))
    }
}

/// SHA-256 of `tag || parent || indices` with indices as `u64` LE.
pub fn derive(tag: &[u8], parent: &Seed, indices: &[u64]) -> Seed {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(parent.0);
    for i in indices {
        h.update(i.to_le_bytes());
    }
    Seed(h.finalize().into())
}

/// Deterministic stream of uniform and Gaussian draws.
pub struct Stream(ChaCha20Rng);

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform in `[0, bound)` by rejection; `bound > 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Standard normal from the next two draws.
    pub fn gaussian(&mut self) -> f64 {
        let a = self.next_u64();
        let b = self.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (b >> 11) as f64 * TWO_POW_M53;
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
    }

    /// `d` independent `N(0, std^2)` draws.
    pub fn gaussian_vec(&mut self, d: usize, std: f64) -> Vec<f64> {
        (0..d).map(|_| std * self.gaussian()).collect()
    }

    /// Uniform random subset of `0..n` of size `k`, sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k.min(n));
        idx.sort_unstable();
        idx
    }
}
