#![allow(dead_code)]

use ssboost::boosting::TrainConfig;
use ssboost::scene::{generate_corpus, SyntheticSceneConfig};
use ssboost::StructuredInstance;

pub fn small_scene() -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        width: 24,
        height: 24,
        num_classes: 3,
        num_shapes: 2,
        hierarchy_levels: 3,
        ..Default::default()
    }
}

pub fn small_corpus(seed: u64, count: usize) -> Vec<StructuredInstance> {
    generate_corpus(&small_scene(), seed, count).unwrap()
}

pub fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        thresholds: vec![0.3, 0.8],
        depths: vec![0, 1, 2],
        lambdas: vec![0.0, 0.01],
        folds: 3,
        dictionary_size: 4,
        kmeans_samples: 2000,
        ..Default::default()
    }
}
