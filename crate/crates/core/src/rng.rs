//! Keyed random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(master seed, replica, generation, ordinal)`. A stream is a fresh
//! xoshiro256++ generator whose state is derived from the key by SplitMix64
//! mixing, so the draws of one particle never depend on how many draws were
//! made by any other particle or on the order in which particles are expanded.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Generator type backing every stream.
pub type StreamRng = Xoshiro256PlusPlus;

/// Generation slot reserved for environment sampling.
pub const ENVIRONMENT_DOMAIN: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master: u64,
    pub replica: u64,
    pub generation: u64,
    pub ordinal: u64,
}

impl StreamKey {
    pub fn new(master: u64, replica: u64, generation: u64, ordinal: u64) -> Self {
        Self {
            master,
            replica,
            generation,
            ordinal,
        }
    }

    /// Stream used to draw an environment path.
    pub fn environment(master: u64, stream_id: u64) -> Self {
        Self::new(master, stream_id, ENVIRONMENT_DOMAIN, 0)
    }

    /// Collapses the key to a 64-bit seed.
    pub fn digest(&self) -> u64 {
        let mut h = splitmix64(self.master ^ 0x6a09_e667_f3bc_c909);
        h = splitmix64(h ^ self.replica.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        h = splitmix64(h ^ self.generation.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        splitmix64(h ^ self.ordinal.wrapping_mul(0x94d0_49bb_1331_11eb))
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.digest())
    }
}

#[inline]
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
