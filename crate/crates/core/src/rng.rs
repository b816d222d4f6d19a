//! Seeded random streams. A run owns one seed; each consumer draws from
//! its own named ChaCha stream so reordering one consumer never shifts
//! the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Gumbel,
    Batches,
    Retrain,
    Arch,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Gumbel => 3,
            Stream::Batches => 4,
            Stream::Retrain => 5,
            Stream::Arch => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
