//! Finite-difference checks for every differentiable primitive and both
//! classification heads. Each case runs `TRIALS` randomized shapes and inputs
//! and reports its worst relative error.

use prkt_core::model::{arcface_loss, softmax_ce_loss};
use prkt_core::Tensor;
use rand::Rng;

use super::*;

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: &[Case] = &[
    ("matmul", matmul),
    ("add", add),
    ("add_broadcast", add_broadcast),
    ("mul", mul),
    ("scale", scale),
    ("relu", relu),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("l2_normalize_rows", l2_rows),
    ("l2_normalize_cols", l2_cols),
    ("reshape", reshape),
    ("mean", mean),
    ("sum", sum),
    ("power", power),
    ("log", log),
    ("exp", exp),
    ("max_pool2d", max_pool),
    ("conv2d", conv2d),
    ("gem_pool", gem_pool),
    ("arc_margin", arc_margin),
    ("cross_entropy", cross_entropy),
    ("softmax_head", softmax_head),
    ("arcface_head", arcface_head),
];

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn matmul(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 3);
        let a = uniform(r, &[d[0], d[1]], -1.0, 1.0);
        let b = uniform(r, &[d[1], d[2]], -1.0, 1.0);
        gradcheck(r, &[a, b], |g, v| g.matmul(v[0], v[1]).unwrap())
    })
}

fn add(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 4, 3);
        let a = uniform(r, &d, -1.0, 1.0);
        let b = uniform(r, &d, -1.0, 1.0);
        gradcheck(r, &[a, b], |g, v| g.add(v[0], v[1]).unwrap())
    })
}

fn add_broadcast(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 4, 3);
        let a = uniform(r, &d, -1.0, 1.0);
        let b = uniform(r, &d[1..], -1.0, 1.0);
        gradcheck(r, &[a, b], |g, v| g.add(v[0], v[1]).unwrap())
    })
}

fn mul(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 4, 2);
        let a = uniform(r, &d, -2.0, 2.0);
        let b = uniform(r, &d, -2.0, 2.0);
        gradcheck(r, &[a, b], |g, v| g.mul(v[0], v[1]).unwrap())
    })
}

fn scale(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let c = r.random_range(-3.0..3.0);
        let a = uniform(r, &d, -1.0, 1.0);
        gradcheck(r, &[a], |g, v| g.scale(v[0], c))
    })
}

fn relu(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = away_from_zero(r, &d, -1.0, 1.0, 0.01);
        gradcheck(r, &[a], |g, v| g.relu(v[0]))
    })
}

fn bn_inputs(r: &mut ChaCha8Rng) -> (Vec<usize>, [Tensor<f64>; 3]) {
    let d = vec![
        r.random_range(2..=4),
        r.random_range(1..=3),
        r.random_range(1..=3),
        r.random_range(1..=3),
    ];
    let x = uniform(r, &d, -2.0, 2.0);
    let gamma = uniform(r, &[d[1]], 0.5, 1.5);
    let beta = uniform(r, &[d[1]], -0.5, 0.5);
    (d, [x, gamma, beta])
}

fn batch_norm_train(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let (_, inputs) = bn_inputs(r);
        gradcheck(r, &inputs, |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0)
    })
}

fn batch_norm_eval(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let (d, inputs) = bn_inputs(r);
        let mean = uniform(r, &[d[1]], -1.0, 1.0).into_data();
        let var = uniform(r, &[d[1]], 0.2, 2.0).into_data();
        gradcheck(r, &inputs, |g, v| {
            g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
        })
    })
}

fn l2_rows(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = away_from_zero(r, &d, -1.0, 1.0, 0.1);
        gradcheck(r, &[a], |g, v| g.l2_normalize(v[0], 1).unwrap())
    })
}

fn l2_cols(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = away_from_zero(r, &d, -1.0, 1.0, 0.1);
        gradcheck(r, &[a], |g, v| g.l2_normalize(v[0], 0).unwrap())
    })
}

fn reshape(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 4, 3);
        let a = uniform(r, &d, -1.0, 1.0);
        let to = vec![d[0] * d[1], d[2]];
        gradcheck(r, &[a], |g, v| {
            let y = g.reshape(v[0], to.clone()).unwrap();
            g.mul(y, y).unwrap()
        })
    })
}

fn mean(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = uniform(r, &d, -1.0, 1.0);
        gradcheck(r, &[a], |g, v| g.mean(v[0]))
    })
}

fn sum(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = uniform(r, &d, -1.0, 1.0);
        gradcheck(r, &[a], |g, v| g.sum(v[0]))
    })
}

fn power(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let p = r.random_range(-2.0..4.0);
        let a = uniform(r, &d, 0.5, 2.0);
        gradcheck(r, &[a], |g, v| g.power(v[0], p))
    })
}

fn log(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = uniform(r, &d, 0.5, 3.0);
        gradcheck(r, &[a], |g, v| g.log(v[0]))
    })
}

fn exp(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = dims(r, 1, 5, 2);
        let a = uniform(r, &d, -2.0, 2.0);
        gradcheck(r, &[a], |g, v| g.exp(v[0]))
    })
}

fn max_pool(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let k = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let d = vec![
            r.random_range(1..=2),
            r.random_range(1..=2),
            r.random_range(k..=k + 3),
            r.random_range(k..=k + 3),
        ];
        let a = distinct(r, &d, 0.01);
        gradcheck(r, &[a], |g, v| g.max_pool2d(v[0], k, stride).unwrap())
    })
}

fn conv2d(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let k = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let (n, c, out) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let h = r.random_range(k..=k + 3);
        let w = r.random_range(k..=k + 3);
        let x = uniform(r, &[n, c, h, w], -1.0, 1.0);
        let kernel = uniform(r, &[out, c, k, k], -1.0, 1.0);
        gradcheck(r, &[x, kernel], |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap())
    })
}

fn gem_pool(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let d = vec![
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(1..=4),
            r.random_range(1..=4),
        ];
        let x = uniform(r, &d, 0.05, 2.0);
        let p = uniform(r, &[d[1]], 0.5, 5.0);
        gradcheck(r, &[x, p], |g, v| g.gem_pool(v[0], v[1], 1e-6).unwrap())
    })
}

fn arc_margin(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let (n, c) = (r.random_range(1..=4), r.random_range(2..=5));
        let s = r.random_range(1.0..30.0);
        let m = 0.2 * r.random_range(0..4) as f64;
        let y = labels(r, n, c);
        let cos = uniform(r, &[n, c], -0.95, 0.95);
        gradcheck(r, &[cos], |g, v| g.arc_margin(v[0], &y, s, m).unwrap())
    })
}

fn cross_entropy(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let (n, c) = (r.random_range(1..=4), r.random_range(2..=6));
        let y = labels(r, n, c);
        let logits = uniform(r, &[n, c], -3.0, 3.0);
        gradcheck(r, &[logits], |g, v| g.cross_entropy(v[0], &y).unwrap())
    })
}

fn softmax_head(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let (n, d, c) = (r.random_range(1..=4), r.random_range(2..=6), r.random_range(2..=5));
        let y = labels(r, n, c);
        let x = uniform(r, &[n, d], -1.0, 1.0);
        let w = uniform(r, &[d, c], -1.0, 1.0);
        let b = uniform(r, &[c], -0.5, 0.5);
        gradcheck(r, &[x, w, b], |g, v| softmax_ce_loss(g, v[0], &y, v[1], v[2]).unwrap())
    })
}

fn arcface_head(seed: u64) -> f64 {
    run_trials(seed, TRIALS, |r| {
        let (n, d, c) = (r.random_range(1..=4), r.random_range(3..=6), r.random_range(2..=5));
        let s = r.random_range(1.0..30.0);
        let m = 0.2 * r.random_range(0..4) as f64;
        let y = labels(r, n, c);
        let x = away_from_zero(r, &[n, d], -1.0, 1.0, 0.1);
        let w = away_from_zero(r, &[d, c], -1.0, 1.0, 0.1);
        gradcheck(r, &[x, w], |g, v| arcface_loss(g, v[0], &y, v[1], s, m).unwrap())
    })
}
