//! Fixed seed-splitting so every stage of a run derives its own stream from
//! one global seed.

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a seed with a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Derives the seed for a named stage (FNV-1a over the label, then mixed).
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(seed, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_get_distinct_stable_seeds() {
        assert_eq!(derive(7, "classifier"), derive(7, "classifier"));
        assert_ne!(derive(7, "classifier"), derive(7, "inverter"));
        assert_ne!(derive(7, "classifier"), derive(8, "classifier"));
        assert_ne!(mix(1, 0), mix(1, 1));
    }
}
