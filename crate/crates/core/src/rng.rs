//! Deterministic RNG substreams.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the run seed
//! and a path of integers (epoch, batch, image, layer, ...), so results do not
//! depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Names the random streams used by one batch (or one evaluation pass).
/// Streams are addressed by image id and layer, so a result does not depend
/// on how images are grouped or scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub scope: [u64; 3],
}

impl StreamKey {
    pub fn new(seed: u64, scope: [u64; 3]) -> Self {
        Self { seed, scope }
    }

    fn with(&self, tail: &[u64]) -> StreamRng {
        let mut path = self.scope.to_vec();
        path.extend_from_slice(tail);
        substream(self.seed, &path)
    }

    pub fn forward(&self, image: u64, layer: usize) -> StreamRng {
        self.with(&[0, image, layer as u64])
    }

    pub fn kernel_grad(&self, layer: usize) -> StreamRng {
        self.with(&[1, layer as u64])
    }

    pub fn input_grad(&self, image: u64, layer: usize) -> StreamRng {
        self.with(&[2, image, layer as u64])
    }
}
