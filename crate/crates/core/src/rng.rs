//! Seeded pseudo-random sources.
//!
//! Every random quantity in a run is derived from a *stream key*: a domain
//! label plus a tuple of integers, hashed with SHA-256 into a ChaCha8 seed.
//! Draws inside a stream are addressed by position (the ChaCha word counter),
//! so a value depends only on its key and index, never on the order in which
//! other values were drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes a domain label and integer parts into a 32-byte seed.
pub fn derive_seed(domain: &str, parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&out);
    seed
}

/// Same as [`derive_seed`] with a trailing byte string (token text, etc).
pub fn derive_seed_with_bytes(domain: &str, parts: &[u64], bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&out);
    seed
}

/// A sequential generator for a stream key.
pub fn stream(domain: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(domain, parts))
}

/// Fills `n` values uniformly from `[-scale, scale)`.
pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect()
}

/// Counter-addressed uniform draws in `[0, 1)`.
///
/// `at(i)` returns the same value regardless of which other indices were
/// read before, which keeps stochastic sampling order-free.
#[derive(Clone)]
pub struct CounterStream {
    rng: ChaCha8Rng,
}

impl CounterStream {
    pub fn new(domain: &str, parts: &[u64]) -> Self {
        Self {
            rng: stream(domain, parts),
        }
    }

    pub fn at(&mut self, index: u64) -> f64 {
        // one f64 consumes two 32-bit words
        self.rng.set_word_pos(u128::from(index) * 2);
        self.rng.random::<f64>()
    }
}
