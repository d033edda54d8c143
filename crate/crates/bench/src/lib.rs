//! Shared inputs for the criterion benches.

use cafegan::data::{make_synthetic_dataset, InMemoryDataset, SyntheticSpec};
use cafegan::training::TrainConfig;
use ndarray::{Array2, ArrayD, IxDyn};

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> ArrayD<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

pub fn desk_batch(n: usize) -> InMemoryDataset {
    make_synthetic_dataset(&SyntheticSpec::desk(n, 0)).expect("desk spec is valid").data
}

pub fn desk_config() -> TrainConfig {
    TrainConfig::desk()
}

/// Alternating single-bit flips, one per row.
pub fn flip_vectors(n: usize, k: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, k), |(i, j)| if i % k == j { 1.0 } else { 0.0 })
}
