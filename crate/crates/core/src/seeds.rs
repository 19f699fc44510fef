//! Deterministic derivation of independent sub-seeds.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stage named `tag` under `seed`.
pub fn derive(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(mix(seed), |acc, b| mix(acc ^ b as u64))
}

/// Seed for the `index`-th member of a family under `seed`.
pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    mix(derive(seed, tag) ^ mix(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_give_distinct_seeds() {
        assert_ne!(derive(1, "data"), derive(1, "init"));
        assert_ne!(derive(1, "data"), derive(2, "data"));
        assert_ne!(derive_indexed(1, "m", 0), derive_indexed(1, "m", 1));
        assert_eq!(derive(5, "x"), derive(5, "x"));
    }
}
