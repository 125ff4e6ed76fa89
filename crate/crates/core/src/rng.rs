use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent child seed for `stream` under `base` (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Named streams so that unrelated consumers of one seed never collide.
pub mod stream {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const RCT: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const INIT_STAGE1: u64 = 10;
    pub const INIT_STAGE2: u64 = 11;
    pub const INIT_BASELINE: u64 = 12;
    pub const BATCHES: u64 = 20;
    pub const COVARIATES: u64 = 30;
}
