//! Seed derivation.
//!
//! Every random stream in a run is an independent ChaCha8 generator whose seed
//! is `splitmix64(run_seed ^ fnv1a(stream) ^ splitmix64(index))`. Streams are
//! named by purpose (`"init"`, `"shuffle"`, `"noise"`, `"negatives"`, ...) and
//! the index distinguishes epochs, users or workers, so consuming one stream
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn sub_seed(seed: u64, stream: &str, index: u64) -> u64 {
    splitmix64(seed ^ fnv1a(stream) ^ splitmix64(index))
}

pub fn stream(seed: u64, stream_name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, stream_name, index))
}

/// Seeds for every random stream of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub seed: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn init(&self) -> Rng {
        stream(self.seed, "init", 0)
    }

    pub fn shuffle(&self, epoch: u64) -> Rng {
        stream(self.seed, "shuffle", epoch)
    }

    /// Reparameterization noise for one optimizer step.
    pub fn noise(&self, step: u64) -> Rng {
        stream(self.seed, "noise", step)
    }

    pub fn dropout(&self, step: u64) -> Rng {
        stream(self.seed, "dropout", step)
    }

    pub fn negatives(&self, step: u64) -> Rng {
        stream(self.seed, "negatives", step)
    }
}
