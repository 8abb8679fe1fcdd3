//! Shared fixtures for the benchmarks.

use msical_core::models::simulate_path;
use msical_core::{CompositeModel, LatentBlock, Replicate, StreamKey};

/// White noise plus a slow Gauss-Markov process and a random walk.
pub fn gyro_model() -> CompositeModel {
    CompositeModel::new(vec![
        LatentBlock::WhiteNoise { sigma2: 1.0 },
        LatentBlock::AutoRegressive {
            phi: 0.999,
            eta2: 1e-3,
        },
        LatentBlock::RandomWalk { gamma2: 1e-6 },
    ])
    .expect("valid model")
}

pub fn gyro_signal(length: usize) -> Replicate {
    simulate_path(&gyro_model(), length, StreamKey::new(1)).expect("simulation succeeds")
}
