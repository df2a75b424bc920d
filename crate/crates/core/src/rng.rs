//! Named random streams derived from a single master seed.
//!
//! Every source of randomness in an experiment is a [`Stream`] plus a short
//! path of indices (generation, phase, client, ...). The derivation is a pure
//! function of its inputs, so perturbing one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Partition,
    KeySampling,
    ClientSampling,
    Variation,
    Batching,
    Data,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x11,
            Stream::Partition => 0x22,
            Stream::KeySampling => 0x33,
            Stream::ClientSampling => 0x44,
            Stream::Variation => 0x55,
            Stream::Batching => 0x66,
            Stream::Data => 0x77,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed value for `stream` at `path` under `master`.
pub fn derive_seed(master: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ stream.tag().rotate_left(56));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0xA5A5)));
    }
    h
}

pub fn stream(master: u64, stream: Stream, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stream, path))
}
