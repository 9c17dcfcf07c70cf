//! Reference implementations used by several test targets.

use prkt_core::eval::RANKS;
use prkt_core::retrieval::EmbeddingStore;
use prkt_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Item `i` is listed before `j` on higher score, or equal score and lower row.
fn before(scores: &[f64], i: usize, j: usize) -> bool {
    scores[i] > scores[j] || (scores[i] == scores[j] && i < j)
}

pub struct MetricsOracle {
    pub map: f64,
    pub rank_hits: Vec<usize>,
}

/// Leave-one-out mAP and Rank-N hit counts, O(R^2 d).
pub fn brute_force_metrics(store: &EmbeddingStore) -> MetricsOracle {
    let r = store.len();
    let labels = store.labels();
    let mut ap_sum = 0.0;
    let mut rank_hits = vec![0; RANKS.len()];
    for q in 0..r {
        let scores: Vec<f64> = (0..r).map(|j| dot(store.row(q), store.row(j))).collect();
        let others = || (0..r).filter(move |&j| j != q);
        // 1-based rank of every relevant item
        let mut ranks: Vec<usize> = others()
            .filter(|&j| labels[j] == labels[q])
            .map(|j| 1 + others().filter(|&i| i != j && before(&scores, i, j)).count())
            .collect();
        ranks.sort_unstable();
        let mut sum = 0.0;
        for (h, &rank) in ranks.iter().enumerate() {
            sum += (h + 1) as f64 / rank as f64;
        }
        ap_sum += sum / ranks.len() as f64;
        for (slot, &n) in rank_hits.iter_mut().zip(&RANKS) {
            if ranks[0] <= n {
                *slot += 1;
            }
        }
    }
    MetricsOracle {
        map: ap_sum / r as f64,
        rank_hits,
    }
}

/// Labelled random store with ties: coarse vectors collide in score, and
/// some rows are exact copies of others.
pub fn random_store(rng: &mut ChaCha8Rng, r_target: usize) -> EmbeddingStore {
    let d = rng.random_range(2..=16);
    let coarse = rng.random_bool(0.5);
    let mut labels = Vec::new();
    let mut id = 0;
    while labels.len() + 2 <= r_target {
        let members = rng.random_range(2..=6).min(r_target - labels.len());
        labels.extend(std::iter::repeat_n(format!("L{id}"), members));
        id += 1;
    }
    if labels.len() < r_target {
        let last = labels.last().unwrap().clone();
        labels.push(last);
    }
    labels.shuffle(rng);
    let r = labels.len();
    let mut data: Vec<f32> = Vec::with_capacity(r * d);
    for i in 0..r {
        if i > 0 && rng.random_bool(0.05) {
            let src = rng.random_range(0..i);
            let row = data[src * d..(src + 1) * d].to_vec();
            data.extend(row);
            continue;
        }
        loop {
            let row: Vec<f32> = (0..d)
                .map(|_| {
                    if coarse {
                        rng.random_range(-1i32..=1) as f32
                    } else {
                        rng.random_range(-1.0f32..1.0)
                    }
                })
                .collect();
            if row.iter().any(|&v| v != 0.0) {
                data.extend(row);
                break;
            }
        }
    }
    let refs = (0..r).map(|i| format!("img{i}")).collect();
    EmbeddingStore::new(&Tensor::new([r, d], data).unwrap(), labels, refs).unwrap()
}

/// Dense re-ranking over `feat` (queries first). Returns rows `0..nq` of the
/// final distance matrix over all points.
pub fn dense_rerank(feat: &[Vec<f32>], nq: usize, k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = feat.len();
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).fold(0.0f64, |s, (&x, &y)| s + x as f64 * y as f64);
    let mut d = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = if i == j { 0.0 } else { (2.0 - 2.0 * dot(&feat[i], &feat[j])).max(0.0) };
        }
    }
    // scale each column by its maximum, then transpose
    let colmax: Vec<f64> = (0..n).map(|j| (0..n).map(|i| d[i][j]).fold(f64::MIN, f64::max)).collect();
    let orig: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| d[j][i] / colmax[i]).collect()).collect();
    let rank: Vec<Vec<usize>> = orig
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap());
            idx
        })
        .collect();
    let k_recip = |i: usize, k: usize| -> Vec<usize> {
        let fwd = &rank[i][..=k];
        fwd.iter().copied().filter(|&c| rank[c][..=k].contains(&i)).collect()
    };
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let kr = k_recip(i, k1);
        let mut expanded = kr.clone();
        for &c in &kr {
            let ckr = k_recip(c, half);
            let inter = ckr.iter().filter(|x| kr.contains(x)).count();
            if inter as f64 > 2.0 / 3.0 * ckr.len() as f64 {
                expanded.extend(&ckr);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let w: Vec<f64> = expanded.iter().map(|&j| (-orig[i][j]).exp()).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in expanded.iter().zip(w) {
            v[i][j] = wj / total;
        }
    }
    if k2 != 1 {
        let mut vq = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in 0..n {
                vq[i][j] = rank[i][..k2].iter().map(|&r| v[r][j]).sum::<f64>() / k2 as f64;
            }
        }
        v = vq;
    }
    (0..nq)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let tmin: f64 = (0..n).map(|k| v[i][k].min(v[j][k])).sum();
                    let jac = 1.0 - tmin / (2.0 - tmin);
                    jac * (1.0 - lambda) + orig[i][j] * lambda
                })
                .collect()
        })
        .collect()
}

/// Unit vector at `deg` degrees.
pub fn unit(deg: f64) -> Vec<f32> {
    let r = deg.to_radians();
    vec![r.cos() as f32, r.sin() as f32]
}

