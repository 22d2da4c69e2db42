//! Seed derivation. Every random stream (init, shuffles, augmentation,
//! synthesis, random pruning) is keyed off the base seed plus a path of
//! integers, so nothing but the base seed needs to be persisted.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed of `base` along `path`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Named streams, so call sites cannot collide by accident.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const RANDOM_PRUNE: u64 = 4;
    pub const CLEAN: u64 = 5;
    pub const DEGRADE: u64 = 6;
    pub const BALANCE: u64 = 8;
}
