use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-based random stream family keyed by `(seed, substream)`.
///
/// Each path gets its own ChaCha stream; within a path, draws are consumed
/// step by step, so the increment of path `k` at step `i` is a pure function
/// of `(seed, substream, k, i)`. Training uses one substream per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathStream {
    pub seed: u64,
    pub substream: u64,
}

impl PathStream {
    pub fn new(seed: u64, substream: u64) -> Self {
        Self { seed, substream }
    }

    pub(crate) fn path_rng(&self, path: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.seed ^ self.substream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path);
        rng
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fills `out` with independent `N(0, h)` draws.
pub(crate) fn fill_increments(rng: &mut ChaCha8Rng, h: f64, out: &mut [f64]) {
    let s = h.sqrt();
    for v in out {
        let z: f64 = rng.sample(StandardNormal);
        *v = s * z;
    }
}
