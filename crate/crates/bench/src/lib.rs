//! Shared fixtures for the criterion benchmarks.

use ztad_core::config::ExperimentConfig;
use ztad_core::matrix::Matrix;
use ztad_core::postprocess::RankedDetection;
use ztad_core::rng::Rng;
use ztad_core::training::{PlainProposal, PlainTarget};

/// Small-but-representative settings for forward-pass benchmarks.
pub fn bench_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.dataset.num_classes = 8;
    config.dataset.videos_per_class = 1;
    config.dataset.min_snippets = 100;
    config.dataset.max_snippets = 100;
    config
}

pub fn random_cost_matrix(n: usize, k: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(n, k, |_, _| rng.uniform_in(-2.0, 2.0))
}

pub fn random_detections(count: usize, seed: u64) -> Vec<RankedDetection> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            let start = rng.uniform_in(0.0, 90.0);
            RankedDetection {
                start,
                end: start + rng.uniform_in(0.5, 10.0),
                class_index: 0,
                score: rng.uniform(),
            }
        })
        .collect()
}

pub fn random_matching_instance(
    queries: usize,
    targets: usize,
    seed: u64,
) -> (Vec<PlainProposal>, Vec<PlainTarget>) {
    let mut rng = Rng::new(seed);
    let proposals = (0..queries)
        .map(|_| {
            let start = rng.uniform_in(0.0, 0.7);
            PlainProposal {
                start,
                end: start + rng.uniform_in(0.05, 0.3),
                logits: (0..targets).map(|_| rng.normal()).collect(),
                actionness: rng.uniform(),
            }
        })
        .collect();
    let gts = (0..targets)
        .map(|class| {
            let start = rng.uniform_in(0.0, 0.7);
            PlainTarget {
                start,
                end: start + rng.uniform_in(0.05, 0.3),
                class,
            }
        })
        .collect();
    (proposals, gts)
}
