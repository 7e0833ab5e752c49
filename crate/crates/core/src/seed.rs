//! Stable fan-out of one master seed into independent per-purpose seeds.

/// Seed for `label` under `master`. Stable across platforms and releases.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a SplitMix64 finalizer over the mix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_masters_separate() {
        assert_eq!(derive_seed(1, "gru_basic"), derive_seed(1, "gru_basic"));
        assert_ne!(derive_seed(1, "gru_basic"), derive_seed(1, "gru_wide"));
        assert_ne!(derive_seed(1, "gru_basic"), derive_seed(2, "gru_basic"));
    }

    #[test]
    fn frozen_value() {
        // Any change here silently changes every derived artifact.
        assert_eq!(
            derive_seed(0, ""),
            splitmix64(splitmix64(0xcbf2_9ce4_8422_2325))
        );
    }
}
