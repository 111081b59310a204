//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! one user seed, so that e.g. changing the mask does not perturb the
//! initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Mask,
    Init,
    Noise,
    Outliers,
    Factors,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Mask => 1,
            Stream::Init => 2,
            Stream::Noise => 3,
            Stream::Outliers => 4,
            Stream::Factors => 5,
        }
    }
}

/// Random generator for the named sub-stream of `seed`.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Like [`stream`], with an extra index (e.g. the day) mixed into the stream id.
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id() | (index.wrapping_add(1) << 8));
    rng
}
