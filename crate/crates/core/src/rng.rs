//! Named, independently seeded random streams.
//!
//! Every random decision derives from one run seed. A stream is keyed by
//! `(seed, stream, index)`, so e.g. the augmentation of the n-th training sample
//! can be reproduced without replaying anything that came before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Augment = 2,
    StochasticDepth = 3,
    Shuffle = 4,
    Synthetic = 5,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
