//! Stable seed derivation.
//!
//! Seeds are folded with the SplitMix64 finalizer:
//! `h = mix(h ^ mix(part + GOLDEN))` for each part, starting from
//! `h = 0x9E37_79B9_7F4A_7C15`. The mapping is part of the on-disk
//! reproducibility contract and must not change.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |h, &p| mix(h ^ mix(p.wrapping_add(GOLDEN))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pinned_values() {
        // Guards the contract: changing these breaks reproducibility of old runs.
        assert_eq!(mix(0), 0);
        assert_eq!(derive_seed(&[1, 2, 3]), 0xd56d_0264_932a_233f);
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 3, 2]));
    }

    #[test]
    fn replicate_grid_is_collision_free() {
        let seen: HashSet<u64> = (0..45).flat_map(|c| (0..10).map(move |r| derive_seed(&[7, c, r]))).collect();
        assert_eq!(seen.len(), 450);
    }
}
