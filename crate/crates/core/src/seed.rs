//! Seed derivation. Every random draw in the crate goes through a ChaCha8
//! stream keyed by a hash of its logical coordinates, so results never
//! depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

// Domain tags keep streams for different purposes apart.
pub(crate) const TAG_EMBED: u64 = 0x11;
pub(crate) const TAG_WEIGHTS: u64 = 0x22;
pub(crate) const TAG_LATENT: u64 = 0x33;
pub(crate) const TAG_SPHERE: u64 = 0x44;
pub(crate) const TAG_LOGITS: u64 = 0x55;
pub(crate) const TAG_SHIFT: u64 = 0x66;
