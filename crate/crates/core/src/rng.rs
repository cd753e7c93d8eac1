//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream derived from
//! the run seed plus a tuple of integer keys (iteration, slice, pixel, ...),
//! so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains, mixed into the key so different consumers never collide.
pub mod domain {
    pub const BATCH: u64 = 1;
    pub const PSF: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MOTION: u64 = 4;
    pub const BIAS: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const SIM_PSF: u64 = 7;
    pub const DIFFUSE: u64 = 8;
    pub const HEAD_BATCH: u64 = 9;
    pub const PERTURB: u64 = 10;
    pub const SCALE: u64 = 11;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 stream keyed by `seed` and `keys`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ splitmix(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut bytes = [0u8; 32];
    let mut s = h;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
