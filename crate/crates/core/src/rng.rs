//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! master seed, a stream kind and an index. Adding draws to one stream never
//! perturbs another, so e.g. a zero chaffing rate leaves the rest of a run
//! bit-identical to an unobfuscated one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Traffic = 1,
    Chaff = 2,
    Delay = 3,
    Tunnel = 4,
    Crypto = 5,
    Dataset = 6,
    Split = 7,
    Mapping = 8,
}

/// splitmix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    mix64(mix64(master ^ mix64(stream as u64)) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, stream, index))
}
