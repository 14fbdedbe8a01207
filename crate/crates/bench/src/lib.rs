//! Shared fixtures for the benchmarks.

use eqsnn_core::eqrnn::{EqrnnConfig, EqrnnNet};
use eqsnn_core::gta::{GtaConfig, GtaNet};
use eqsnn_core::snn::{SnnConfig, SnnNet};
use eqsnn_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn eqrnn(paper: bool) -> (EqrnnNet, Tensor) {
    let cfg = if paper { EqrnnConfig::paper() } else { EqrnnConfig::scaled(8) };
    let net = EqrnnNet::new(cfg, 1).expect("valid config");
    let width = net.input_width();
    (net, Tensor::matrix(64, width, values(64 * width, 2)))
}

pub fn gta() -> (GtaNet, Vec<f64>, Vec<Vec<f64>>) {
    let cfg = GtaConfig::default();
    let d = cfg.d_model;
    let net = GtaNet::new(cfg, 3).expect("valid config");
    let history = (0..net.config.capacity() as u64).map(|i| values(d, 10 + i)).collect();
    (net, values(d, 4), history)
}

pub fn snn() -> (SnnNet, Vec<f64>) {
    let net = SnnNet::new(SnnConfig::new(40, 64), 5).expect("valid config");
    let rates = values(40, 6).into_iter().map(|v| 0.5 + 0.5 * v).collect();
    (net, rates)
}
