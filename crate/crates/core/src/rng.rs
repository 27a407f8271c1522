//! Deterministic stream-splitting RNG.
//!
//! Every random decision in the crate draws from a ChaCha8 stream addressed
//! by (seed, domain, index). Streams never overlap: the domain occupies the
//! top 16 bits of the stream id, the index the low 48. Re-running any stage
//! with the same seed reproduces it bitwise, independent of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub mod domain {
    pub const DATA_INIT: u64 = 1;
    pub const DATA_CTRL: u64 = 2;
    pub const DATA_RESAMPLE: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const EPISODE: u64 = 6;
    pub const TASK: u64 = 7;
}

const INDEX_BITS: u64 = 48;

/// Independent stream for (seed, domain, index).
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    assert!(index < (1 << INDEX_BITS), "stream index out of range");
    assert!(domain < (1 << 16), "stream domain out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << INDEX_BITS) | index);
    rng
}

/// Standard normal draw.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Fill a slice with iid N(0, scale^2) draws.
pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        *v = scale * randn(rng);
    }
}
