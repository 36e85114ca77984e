//! Fixtures shared by the benchmarks.

use cspflow::harness::{generate_dataset, DatasetParams, DatasetRecord, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn records(n: usize) -> Vec<DatasetRecord> {
    generate_dataset(&DatasetParams {
        n,
        ..DatasetParams::default()
    })
    .expect("valid generator parameters")
}

/// Scores on a coarse grid so ties are common.
pub fn scored(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pos = i % 2 == 0;
            let shift = if pos { 10 } else { 0 };
            ((rng.gen_range(0..100) + shift) as f64 / 100.0, pos)
        })
        .collect()
}

pub fn scenario(n: usize, rate: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.shape.rate = rate;
    cfg.dataset.generate.as_mut().expect("generated dataset").n = n;
    cfg
}
