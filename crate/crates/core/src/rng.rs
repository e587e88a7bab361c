//! Keyed deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is a
//! SHA-256 digest of `(domain, seed, labels...)`. Draws therefore depend only
//! on what they are for (a tensor name, an expert index, a particle and
//! step) and never on iteration order or thread scheduling.
//!
//! Within a per-tensor stream, element `i` consumes the `i`-th 64-bit word
//! pair, so a chunk starting at element `k` can seek directly with
//! [`ElementStream::seek`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain tag for drop/keep masks (DARE and DELLA share it).
pub const MASK_DOMAIN: &str = "mask";

fn key(domain: &str, seed: u64, labels: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"swarm-merge/");
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(seed.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label);
    }
    h.finalize().into()
}

/// A ChaCha8 generator keyed by domain, seed and labels.
pub fn keyed_rng(domain: &str, seed: u64, labels: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key(domain, seed, labels))
}

/// Derives an independent child seed, e.g. one per expert.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let k = key(domain, seed, &[&index.to_le_bytes()]);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}

/// Maps 64 random bits to a uniform float in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Per-tensor uniform stream: element `i` of tensor `name` always receives
/// the same value for a given `(domain, seed)`.
pub struct ElementStream {
    rng: ChaCha8Rng,
}

impl ElementStream {
    pub fn new(domain: &str, seed: u64, tensor: &str) -> Self {
        Self {
            rng: keyed_rng(domain, seed, &[tensor.as_bytes()]),
        }
    }

    /// Positions the stream so the next draw belongs to `element`.
    pub fn seek(&mut self, element: usize) {
        // one u64 = two 32-bit words per element
        self.rng.set_word_pos(2 * element as u128);
    }

    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        unit_f64(self.rng.next_u64())
    }
}

/// The scalar pair `(r1, r2) ~ U(0,1)²` for particle `particle` at step `step`.
pub fn pso_coefficients(seed: u64, particle: usize, step: usize) -> (f64, f64) {
    let mut rng = keyed_rng(
        "pso-coefficients",
        seed,
        &[&(particle as u64).to_le_bytes(), &(step as u64).to_le_bytes()],
    );
    (unit_f64(rng.next_u64()), unit_f64(rng.next_u64()))
}
