//! Fixtures shared by the kernel benchmarks.

use punet_core::gradcheck::random_tensor;
use punet_core::punet::PUNet;
use punet_core::seghead::PromptTask;
use punet_core::windowing::Grid;
use punet_core::{ExperimentConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unit-spaced `h × w` lattice.
pub fn lattice(h: usize, w: usize) -> Grid {
    let points = (0..h * w).map(|i| [(i % w) as f64, (i / w) as f64]).collect();
    Grid { h, w, points }
}

/// Toy-preset network with one three-class task named `t`.
pub fn toy_model() -> PUNet {
    let mut m = PUNet::build(&ExperimentConfig::toy()).expect("toy preset is valid");
    m.add_task(PromptTask::multiclass("t", vec![1, 2, 3]), 7).expect("fresh task");
    m
}

/// `[b, h, w, 1]` batch of uniform noise.
pub fn image_batch(b: usize, size: usize, seed: u64) -> Tensor {
    random_tensor(&[b, size, size, 1], 1.0, &mut rng(seed))
}
