//! Seeded random substreams.
//!
//! One user-facing seed feeds every random consumer. Each consumer asks for
//! a named stream (plus an index, e.g. the restart number) so adding a new
//! consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_OPTIMIZER: &str = "optimizer-restarts";
pub const STREAM_FOLDS: &str = "cv-folds";
pub const STREAM_SYNTH_TRAJECTORY: &str = "synth-trajectory";
pub const STREAM_SYNTH_SUBJECTS: &str = "synth-subjects";

// FNV-1a, fixed so stream ids are stable across builds and platforms.
fn stream_id(name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes().chain(index.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name, index));
    rng
}
