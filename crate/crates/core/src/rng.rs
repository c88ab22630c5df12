//! Purpose-split seeding.
//!
//! Every consumer of randomness draws from its own xoshiro256++ stream,
//! keyed by the run seed, a [`Purpose`] tag and an extra index (an epoch, a
//! class, ...). Changing how one subsystem consumes random numbers never
//! shifts the numbers another subsystem sees.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    BlobCenters,
    BlobTrain,
    BlobTest,
    Init,
    Shuffle,
    RandomLabels,
    Scrub,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::BlobCenters => 0x0b10_bce7,
            Purpose::BlobTrain => 0x0b10_b7a1,
            Purpose::BlobTest => 0x0b10_b7e5,
            Purpose::Init => 0x1417,
            Purpose::Shuffle => 0x5_4ff1e,
            Purpose::RandomLabels => 0x4a_be15,
            Purpose::Scrub => 0x5c_4ab,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The 64-bit seed of the stream `(seed, purpose, extra)`.
pub fn derive_seed(seed: u64, purpose: Purpose, extra: u64) -> u64 {
    mix(mix(mix(seed) ^ purpose.tag()) ^ extra)
}

pub fn stream(seed: u64, purpose: Purpose, extra: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose, extra))
}
