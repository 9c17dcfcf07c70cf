#![allow(dead_code)]

pub mod grad_suite;
pub mod oracles;

use prkt_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-3;
pub const TRIALS: usize = 100;

/// Below this magnitude gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values in `[lo, hi]` whose magnitude is at least `gap`, keeping
/// ReLU-style kinks out of finite-difference reach.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(lo..hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A random permutation of evenly spaced values, so every pair differs by
/// at least `step`.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], step: f64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_loss<F>(build: &F, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Compares reverse-mode gradients of `sum(build(inputs) * R)` for a random
/// `R` against central differences, returning the worst relative error.
pub fn gradcheck<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = uniform(rng, g.value(out).shape(), -1.0, 1.0);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + FD_EPS;
            let up = weighted_loss(&build, &probe, &weights);
            probe[i].data_mut()[j] = x0 - FD_EPS;
            let down = weighted_loss(&build, &probe, &weights);
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Runs `trials` gradchecks and returns the worst relative error seen.
pub fn run_trials(seed: u64, trials: usize, mut trial: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let mut rng = rng(seed);
    (0..trials).map(|_| trial(&mut rng)).fold(0.0, f64::max)
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
