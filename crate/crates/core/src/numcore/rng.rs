//! Seeded random streams.
//!
//! Every consumer of randomness draws from a named stream derived from one
//! master seed, so adding draws to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const WEIGHTS: &str = "weights";
pub const DROPOUT_DEVICE: &str = "dropout-device";
pub const DROPOUT_SERVER: &str = "dropout-server";
pub const LINK_FORWARD: &str = "link-forward";
pub const LINK_BACKWARD: &str = "link-backward";
pub const SHUFFLE: &str = "data-shuffle";
pub const CHANNEL: &str = "channel-noise";
pub const EVAL_LINK: &str = "eval-link";

/// FNV-1a; stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

/// Independent generator for `(seed, name, index)`, e.g. one per frame.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mixed = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    stream(mixed, name)
}
