//! Seeded random streams.
//!
//! All randomness is drawn from ChaCha8 (`rand_chacha::ChaCha8Rng`), a
//! counter-based generator. A stream is identified by the run seed plus a
//! short path of integer tags (purpose, epoch, step, item, ...); the tags are
//! folded with SplitMix64 into the 256-bit key. Two call sites with the same
//! seed and tag path see the same numbers regardless of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags, so distinct purposes never share numbers by accident.
pub mod tag {
    pub const MASK: u64 = 0x6d61_736b;
    pub const AUGMENT: u64 = 0x6175_676d;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const INIT: u64 = 0x696e_6974;
    pub const SYNTH: u64 = 0x7379_6e74;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const SUBSET: u64 = 0x7375_6273;
    pub const STAIN: u64 = 0x7374_6e73;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the generator for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut state = seed;
    for &t in tags {
        state = splitmix64(&mut state) ^ t.rotate_left(17);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
