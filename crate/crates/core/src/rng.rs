//! Named, independently seedable random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DmmRng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const DIFFUSION_T: &str = "diffusion-t";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream `name` of the generator family rooted at `seed`.
pub fn stream(seed: u64, name: &str) -> DmmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Sub-stream `index` of `name`, e.g. one per epoch or per record.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> DmmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name.as_bytes()) ^ index.rotate_left(17));
    rng
}

/// Exact position of a ChaCha generator, for checkpointing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &DmmRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> DmmRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
