//! Named random sub-streams derived from one run seed.
//!
//! Each stage draws from its own ChaCha stream so that changing how much
//! randomness one stage consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Batches,
    Patches,
    CaseSelection,
    Dataset,
    ToySamples,
    ToyNoise,
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Batches => 2,
            Stream::Patches => 3,
            Stream::CaseSelection => 4,
            Stream::Dataset => 5,
            Stream::ToySamples => 6,
            Stream::ToyNoise => 7,
            Stream::Custom(k) => 1000 + k,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
