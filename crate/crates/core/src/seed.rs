//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the
//! master seed, a domain label and an index, so streams never overlap and
//! adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit seed from a master seed, a domain label, and an index.
pub fn derive(master: u64, domain: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

/// A ChaCha8 generator for the stream `(master, domain, index)`.
pub fn stream(master: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, domain, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "noise", 0).random();
        let b: u64 = stream(7, "noise", 0).random();
        let c: u64 = stream(7, "sample", 0).random();
        let d: u64 = stream(7, "noise", 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
