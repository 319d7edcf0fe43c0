//! Named random substreams derived from one master seed.
//!
//! Every consumer of randomness (data generation, diffusion noise, parameter
//! init, ...) gets its own ChaCha stream so changing how much one component
//! draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const NOISE: &str = "noise";
pub const INIT: &str = "init";
pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Substream for one item of a batch or dataset.
pub fn item_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}
