//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by `(base seed, stream tag, index)`
//! so that episode `i` of a run sees the same randomness regardless of
//! what ran before it or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const TRAIN: u64 = 0x7472_6169_6e00;
    pub const EVAL: u64 = 0x6576_616c_0000;
    pub const EXPORT: u64 = 0x6578_706f_7274;
    pub const INIT: u64 = 0x696e_6974_0000;
    pub const FRAMES: u64 = 0x6672_616d_6573;
    pub const PPS: u64 = 0x7070_7300_0000;
    pub const SYNTH: u64 = 0x7379_6e74_6800;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, stream: u64, index: u64) -> Rng {
    rng(derive(base, stream, index))
}
