//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer of randomness asks for a stream by name plus an optional
//! list of indices (epoch, instance, ...). Streams are independent ChaCha8
//! generators, so any component can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Sampler,
    Init,
    Description,
    Captions,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Sampler => 2,
            Stream::Init => 3,
            Stream::Description => 4,
            Stream::Captions => 5,
        }
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = mix(seed ^ mix(stream.id()));
    for &i in indices {
        h = mix(h ^ mix(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, indices))
}

/// FNV-1a, used for hashing tokens and ids into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
