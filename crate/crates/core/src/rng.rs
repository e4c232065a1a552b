//! Keyed random streams and content digests.
//!
//! Every random decision in the crate is drawn from a generator whose seed is
//! derived from an explicit key path (master seed, segment, cell, ...). Two
//! jobs with the same key path see the same stream no matter which thread or
//! in what order they run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator type used throughout the crate.
pub type KeyedRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key path into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit hash of a string label, for use inside key paths.
pub fn label_hash(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator for the given key path.
pub fn keyed_rng(parts: &[u64]) -> KeyedRng {
    KeyedRng::seed_from_u64(derive_seed(parts))
}

/// Counter-based uniform draw on `[0, 1)` for element `counter` of stream `key`.
#[inline]
pub fn counter_uniform(key: u64, counter: u64) -> f64 {
    let bits = splitmix64(key ^ splitmix64(counter.wrapping_mul(GOLDEN)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental SHA-256 for streamed content.
#[derive(Default)]
pub struct ContentDigest(Sha256);

impl ContentDigest {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_seed_depends_on_order_and_content() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[1, 2, 0]));
    }

    #[test]
    fn keyed_streams_are_reproducible() {
        let a: Vec<u32> = keyed_rng(&[7, 9]).random_iter().take(8).collect();
        let b: Vec<u32> = keyed_rng(&[7, 9]).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn counter_uniform_in_unit_interval() {
        for i in 0..10_000 {
            let u = counter_uniform(42, i);
            assert!((0.0..1.0).contains(&u));
        }
        let mean: f64 = (0..100_000).map(|i| counter_uniform(3, i)).sum::<f64>() / 100_000.0;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
