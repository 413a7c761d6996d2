//! Seeded step shuffling.
//!
//! The permutation is a Fisher-Yates shuffle driven by SplitMix64. The
//! generator state is the first 8 bytes (little-endian) of
//!
//! ```text
//! sha256("ccb-shuffle" || seed_le64 || len_le64(item_id) || item_id || index_le64)
//! ```
//!
//! Each draw in `[0, bound)` rejects values from the incomplete top bucket so
//! the result is unbiased. Only integer arithmetic is involved, so a
//! permutation is the same on every platform.

use sha2::{Digest, Sha256};

use crate::trace::CandidateTrace;

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let limit = u64::MAX - u64::MAX % bound;
        loop {
            let r = self.next_u64();
            if r < limit {
                return r % bound;
            }
        }
    }
}

pub fn shuffle_seed(seed: u64, item_id: &str, candidate_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ccb-shuffle");
    h.update(seed.to_le_bytes());
    h.update((item_id.len() as u64).to_le_bytes());
    h.update(item_id.as_bytes());
    h.update((candidate_index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// The permutation applied to `k` steps: position `i` of the output holds
/// original step `perm[i]`.
pub fn shuffle_permutation(k: usize, seed: u64, item_id: &str, candidate_index: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut rng = SplitMix64::new(shuffle_seed(seed, item_id, candidate_index));
    for i in (1..k).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Reorder the steps of `trace`. Step texts (with their whitespace) are kept
/// as they are and the raw text is their concatenation; the result is not
/// re-segmented.
pub fn shuffle_steps(trace: &CandidateTrace, seed: u64, item_id: &str, candidate_index: usize) -> CandidateTrace {
    let perm = shuffle_permutation(trace.steps.len(), seed, item_id, candidate_index);
    CandidateTrace::from_step_texts(perm.iter().map(|&i| trace.steps[i].text.as_str()), trace.final_answer.clone())
}
