#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsi_attrib::model::{build_model, shapes3, train, Model, ModelConfig, TrainConfig};
use rsi_attrib::Tensor;

/// The toy CNN trained the way `train --synthetic shapes3 --seed <seed>` does.
pub fn trained(seed: u64) -> Model {
    let mut m = build_model(ModelConfig::shapes3(seed)).unwrap();
    let data = shapes3(seed, rsi_attrib::cli::DEFAULT_PER_CLASS);
    train(
        &mut m,
        &data,
        &TrainConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}
