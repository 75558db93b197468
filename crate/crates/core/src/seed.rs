//! Seed derivation.
//!
//! Every rollout seed is `mix(run_seed, generation_step, prompt_index, sample_index)`:
//! each word is folded in with `state = splitmix64(state ^ word)`, starting
//! from a fixed odd constant. Any change here changes every recorded run.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |state, &w| splitmix64(state ^ w))
}
