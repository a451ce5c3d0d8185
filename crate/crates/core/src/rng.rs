//! Named random sub-streams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Noise,
    Split,
    Init,
    Shuffle,
    Ablation,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Noise => 2,
            Stream::Split => 3,
            Stream::Init => 4,
            Stream::Shuffle => 5,
            Stream::Ablation => 6,
        }
    }
}

/// Independent generator for `(seed, stream, index)`; `index` distinguishes
/// e.g. epochs within the shuffle stream.
pub fn sub_rng(seed: u64, stream: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((stream.id() << 48) ^ index);
    rng
}
