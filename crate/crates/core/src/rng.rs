//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from the run seed,
//! so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers for [`stream`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const EVAL: u64 = 6;
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` of `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Serializable position of a ChaCha stream: 4 seed words, stream id, and the
/// 128-bit word position split into two words.
pub fn save_state(rng: &Rng) -> [u64; 7] {
    let seed = rng.get_seed();
    let word = |i: usize| u64::from_le_bytes(seed[i * 8..i * 8 + 8].try_into().unwrap());
    let pos = rng.get_word_pos();
    [
        word(0),
        word(1),
        word(2),
        word(3),
        rng.get_stream(),
        pos as u64,
        (pos >> 64) as u64,
    ]
}

pub fn restore_state(state: &[u64; 7]) -> Rng {
    let mut seed = [0u8; 32];
    for i in 0..4 {
        seed[i * 8..i * 8 + 8].copy_from_slice(&state[i].to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state[4]);
    rng.set_word_pos(state[5] as u128 | ((state[6] as u128) << 64));
    rng
}
