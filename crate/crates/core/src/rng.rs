//! Keyed random streams.
//!
//! Every random draw in the library comes from a stream identified by a seed
//! plus a short key path (purpose, epoch, batch, modality, ...). Streams never
//! share state, so the values drawn for one key do not depend on how many
//! draws other keys consumed or in which order work was scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SHUFFLE: u64 = 0x5348_5546;
pub const DROPOUT: u64 = 0x4452_4f50;
pub const CORRUPT_TRAIN: u64 = 0x4354_524e;
pub const CORRUPT_TEST: u64 = 0x4354_5354;
pub const INIT: u64 = 0x494e_4954;
pub const PARTITION: u64 = 0x5041_5254;
pub const SYNTH: u64 = 0x5359_4e54;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key path into a single 64-bit value.
pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// A fresh ChaCha stream for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, keys))
}

/// A single uniform draw in `[0, 1)` for `(seed, keys...)`.
pub fn unit(seed: u64, keys: &[u64]) -> f64 {
    (mix(seed, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_keys_give_distinct_values() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
        assert_ne!(mix(1, &[2]), mix(2, &[2]));
        assert_eq!(mix(7, &[1, 2, 3]), mix(7, &[1, 2, 3]));
    }

    #[test]
    fn unit_is_roughly_uniform() {
        let n = 20_000u64;
        let mean: f64 = (0..n).map(|i| unit(9, &[i])).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((0..n).all(|i| (0.0..1.0).contains(&unit(9, &[i]))));
    }
}
