//! Small deterministic PRNG for seeded harnesses.
//!
//! Reports embed the seed, so every randomized run must be reproducible
//! byte-for-byte across platforms and dependency bumps. A SplitMix64 keeps
//! that guarantee in ~20 lines instead of pinning an external generator.

/// SplitMix64 stream. Same seed, same sequence, everywhere.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform value in `[0, bound)`; `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        // Modulo bias is irrelevant at the bounds used here (<= 2^17).
        self.next_u64() % bound
    }
}
