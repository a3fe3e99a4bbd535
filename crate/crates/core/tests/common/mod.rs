#![allow(dead_code)]

pub mod oracle;

use ardm_core::rng;
use ardm_core::Tensor;
use rand::Rng as _;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-6)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of `f` with respect to element `idx` of input
/// `which`.
pub fn central_difference(inputs: &[Tensor], which: usize, idx: usize, h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let bump = |delta: f64| {
        let mut moved = inputs.to_vec();
        let mut data = moved[which].to_vec();
        data[idx] += delta;
        moved[which] = Tensor::new(moved[which].shape().to_vec(), data).unwrap();
        f(&moved)
    };
    (bump(h) - bump(-h)) / (2.0 * h)
}

/// Small config with dropout off, for exact comparisons.
pub fn tiny_config(seed: u64) -> ardm_core::ModelConfig {
    ardm_core::ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 13,
        max_positions: 48,
        dropout_rate: 0.0,
        seed,
    }
}

/// Parameters with entries uniform in [-scale, scale], large enough that
/// every gradient is comfortably above finite-difference noise.
pub fn spread_params(cfg: &ardm_core::ModelConfig, scale: f64, seed: u64) -> ardm_core::Params {
    let base = ardm_core::Params::init(cfg).unwrap();
    let mut r = rng::seeded(seed);
    base.map(|t| {
        let data = (0..t.numel()).map(|_| r.random_range(-scale..scale)).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    })
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}
