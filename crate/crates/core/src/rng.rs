//! Seeded, stream-separated randomness.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Distinct stream ids under one seed give independent ChaCha streams, so
/// respondents, rows and trials can be simulated in any order (or in
/// parallel) without changing their draws.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream under the same seed. The child id is mixed with the
    /// parent id so nested derivations do not collide.
    pub fn derive(&self, child: u64) -> Self {
        Self::new(self.seed, mix(self.stream_id, child))
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

// splitmix64 finalizer over the pair
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
