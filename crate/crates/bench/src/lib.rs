//! Shared inputs for the criterion benches.

use aibnet_core::Tensor;

/// Deterministic pseudo-random tensor with values in `[0, 1)`.
pub fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 24) as f32
    })
}
