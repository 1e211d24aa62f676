//! Named random substreams.
//!
//! Every stage draws from its own ChaCha stream derived from the run seed and
//! a stage name, so adding draws in one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const SPLIT_INDEPENDENTS: &str = "split/independents";
pub const NEGATIVES: &str = "negatives";
pub const DUP_CAP: &str = "dup-cap";
pub const TRIPLETS: &str = "triplets";
pub const SCENARIO: &str = "scenario";
pub const PROJECTION: &str = "projection";
pub const CLASSIFIER: &str = "classifier";
pub const SYNTH: &str = "synth";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(name.as_bytes()));
    rng
}
