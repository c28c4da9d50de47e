//! SplitMix64 stream used for every seeded draw in the crate.
//!
//! The generator is hand-rolled so that the value stream is fixed by this
//! file alone and never shifts with a dependency upgrade.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution (exact in f32).
    pub fn next_unit_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform_symmetric(&mut self, bound: f32) -> f32 {
        (2.0 * self.next_unit_f32() - 1.0) * bound
    }

    /// Uniform integer in `[0, upper)`. `upper` must be non-zero.
    pub fn below(&mut self, upper: u64) -> u64 {
        debug_assert!(upper > 0);
        // Multiply-shift keeps the mapping platform independent.
        ((self.next_u64() as u128 * upper as u128) >> 64) as u64
    }
}
