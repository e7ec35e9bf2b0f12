// SPDX-License-Identifier: Apache-2.0

//! Deterministic derivation of independent RNG streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Child seed for the stream named `label`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(b"fedbench-seed")
        .chain_update(base.to_be_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(base: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
