//! Shared fixtures for the benchmarks.

use ccn_core::trainer::{Architecture, HeadMode, Model, TrainConfig};
use ccn_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The desk-scale architecture with the given head.
pub fn desk_arch(head_mode: HeadMode) -> Architecture {
    Architecture { head_mode, ..TrainConfig::default().arch }
}

pub fn desk_model(head_mode: HeadMode) -> Model {
    let cfg = TrainConfig::default();
    Model::init(desk_arch(head_mode), cfg.backbone_widths, 0).expect("desk architecture is valid")
}

/// Random ROI features `[batch, k, k, ch_in]`.
pub fn roi_batch(arch: &Architecture, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[batch, arch.k, arch.k, arch.ch_in], 1.0, &mut rng)
}
