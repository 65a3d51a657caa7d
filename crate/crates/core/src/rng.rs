//! Seed derivation. One experiment seed fans out into independent, labeled
//! streams so that reordering unrelated components never perturbs each other's
//! draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from a root seed and a component label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a offset basis
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

/// A deterministic stream for the given root seed and label.
pub fn rng_from(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a with a caller-chosen offset basis; the stable string hash used for
/// embeddings and the response babbler.
pub fn fnv1a64_seeded(bytes: &[u8], seed: u64) -> u64 {
    let mut h = seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn labeled_streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "corpus"), derive_seed(7, "corpus"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(7, "engine"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(8, "corpus"));

        let mut a = rng_from(42, "x");
        let mut b = rng_from(42, "x");
        let draws_a: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let draws_b: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(draws_a, draws_b);
    }

    #[test]
    fn string_hash_depends_on_seed_and_content() {
        let h1 = fnv1a64_seeded(b"alpha", 1);
        assert_eq!(h1, fnv1a64_seeded(b"alpha", 1));
        assert_ne!(h1, fnv1a64_seeded(b"alpha", 2));
        assert_ne!(h1, fnv1a64_seeded(b"beta", 1));
    }
}
