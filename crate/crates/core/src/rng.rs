//! Counter-based random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha8 stream whose key is
//! the run seed and whose 64-bit stream id is a mix of
//! `(replication, t, component)`. A cell can therefore be re-drawn in any
//! order, on any worker, and always yields the same values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Component tags used as the last counter word.
pub mod component {
    pub const FEATURE: u64 = 0;
    pub const ASSIGNMENT: u64 = 1;
    pub const OUTCOME: u64 = 2;
    pub const JOINT: u64 = 3;
    pub const PROBE: u64 = 16;
    pub const RESAMPLE: u64 = 17;
    pub const SAM: u64 = 18;
    pub const OUTER: u64 = 19;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for a `(replication, t, component)` cell.
pub fn stream_id(replication: u64, t: u64, component: u64) -> u64 {
    let mut h = splitmix(replication);
    h = splitmix(h ^ t.wrapping_mul(0xa076_1d64_78bd_642f));
    splitmix(h ^ component.wrapping_mul(0xe703_7ed1_a0b4_28db))
}

/// RNG for one counter cell.
pub fn cell_rng(seed: u64, replication: u64, t: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(replication, t, component));
    rng
}

/// Derives a child seed, e.g. one per outer Monte Carlo replication.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}
