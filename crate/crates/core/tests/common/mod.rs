#![allow(dead_code)]

use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stablelabel::hmm::{HmmModel, StateSpace};
use stablelabel::providers::{simulate_records, RecordStream, SimConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random probability vector with every entry at least `floor`.
pub fn random_dist(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

pub fn random_model(rng: &mut impl Rng, n: usize) -> HmmModel {
    HmmModel::new(
        StateSpace::numbered(n).unwrap(),
        random_dist(rng, n, 0.01),
        (0..n).map(|_| random_dist(rng, n, 0.01)).collect(),
        (0..n).map(|_| random_dist(rng, n, 0.01)).collect(),
    )
    .unwrap()
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Total variation distance between two distributions.
pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

pub fn small_stream(length: usize, seed: u64) -> (SimConfig, RecordStream) {
    let config = SimConfig {
        length,
        seed,
        ..SimConfig::default()
    };
    let stream = simulate_records(&config).unwrap();
    (config, stream)
}

/// The simulator's own chain and emission as a model.
pub fn sim_model(config: &SimConfig) -> HmmModel {
    let n = config.states.len();
    HmmModel::new(
        config.states.clone(),
        vec![1.0 / n as f64; n],
        config.true_transitions.clone(),
        config.emission.clone(),
    )
    .unwrap()
}

/// An in-memory log sink that stays readable after being handed out.
#[derive(Clone, Default)]
pub struct SharedBuf(pub Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
