//! k-reciprocal re-ranking.
//!
//! Distances among all points are `2 - 2cos`, scaled per row by the row
//! maximum. Each point gets a weighted indicator vector over its expanded
//! k-reciprocal neighbour set, smoothed by averaging over its `k2` nearest
//! points; the final distance blends the original distance with a Jaccard
//! distance between those vectors.

use serde::{Deserialize, Serialize};

use super::search::{by_score_desc, Hit};
use super::store::{dot_f64, l2_normalized, EmbeddingStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, gallery_size: usize) -> Result<()> {
        if !(self.k1 > self.k2 && self.k2 >= 1) {
            return Err(Error::invalid(format!(
                "re-ranking needs k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.k1 >= gallery_size {
            return Err(Error::invalid(format!(
                "k1={} must be smaller than the gallery size {gallery_size}",
                self.k1
            )));
        }
        Ok(())
    }
}

/// Re-ranked query-to-gallery distances, row-major `[queries, gallery]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankedDistances {
    pub num_queries: usize,
    pub gallery_size: usize,
    pub distance: Vec<f64>,
    /// Cosine similarities, used to break distance ties.
    pub cosine: Vec<f64>,
    /// Whether query `i` is gallery row `i` (leave-one-out mode).
    pub within_store: bool,
}

impl RerankedDistances {
    pub fn dist(&self, q: usize, g: usize) -> f64 {
        self.distance[q * self.gallery_size + g]
    }

    /// Gallery rows for query `q` by ascending distance, then descending
    /// cosine, then row. In leave-one-out mode the query row is dropped.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let base = q * self.gallery_size;
        let mut idx: Vec<usize> = (0..self.gallery_size)
            .filter(|&g| !(self.within_store && g == q))
            .collect();
        idx.sort_by(|&a, &b| {
            self.distance[base + a]
                .total_cmp(&self.distance[base + b])
                .then_with(|| by_score_desc((a, self.cosine[base + a]), (b, self.cosine[base + b])))
        });
        idx
    }

    /// Top-`k` hits for query `q`; the score is `1 - distance`.
    pub fn hits(&self, store: &EmbeddingStore, q: usize, k: usize) -> Vec<Hit> {
        self.ranking(q)
            .into_iter()
            .take(k)
            .map(|row| Hit {
                row,
                patent_id: store.labels()[row].clone(),
                image_path: store.image_refs()[row].clone(),
                score: 1.0 - self.dist(q, row),
            })
            .collect()
    }
}

/// Indices of the `k + 1` nearest points (self included) of row `i`.
fn head(rank: &[Vec<usize>], i: usize, k: usize) -> &[usize] {
    &rank[i][..(k + 1).min(rank[i].len())]
}

fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    head(rank, i, k)
        .iter()
        .copied()
        .filter(|&c| head(rank, c, k).contains(&i))
        .collect()
}

/// Core pipeline over `all` unit vectors, of which the first `num_queries`
/// are probes. Returns probe-to-all final distances and cosines.
fn rerank_all(all: &[&[f32]], num_queries: usize, p: &RerankParams) -> (Vec<f64>, Vec<f64>) {
    let n = all.len();
    let mut cos = vec![0.0; n * n];
    for i in 0..n {
        cos[i * n + i] = 1.0;
        for j in 0..i {
            let c = dot_f64(all[i], all[j]);
            cos[i * n + j] = c;
            cos[j * n + i] = c;
        }
    }
    let mut orig: Vec<f64> = cos.iter().map(|&c| (2.0 - 2.0 * c).max(0.0)).collect();
    for i in 0..n {
        orig[i * n + i] = 0.0;
        let row = &mut orig[i * n..(i + 1) * n];
        let mx = row.iter().fold(0.0f64, |a, &b| a.max(b));
        if mx > 0.0 {
            row.iter_mut().for_each(|v| *v /= mx);
        }
    }
    let rank: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let row = &orig[i * n..(i + 1) * n];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let half = (p.k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        let base = reciprocal(&rank, i, p.k1);
        let mut expanded = base.clone();
        for &cand in &base {
            let cand_set = reciprocal(&rank, cand, half);
            let inter = cand_set.iter().filter(|c| base.contains(c)).count();
            if 3 * inter > 2 * cand_set.len() {
                expanded.extend(cand_set);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let w: Vec<f64> = expanded.iter().map(|&j| (-orig[i * n + j]).exp()).collect();
        let total: f64 = w.iter().sum();
        for (&j, &wj) in expanded.iter().zip(&w) {
            v[i * n + j] = wj / total;
        }
    }

    if p.k2 != 1 {
        let mut qe = vec![0.0f64; n * n];
        for i in 0..n {
            let nbrs = &rank[i][..p.k2.min(n)];
            for &m in nbrs {
                for k in 0..n {
                    qe[i * n + k] += v[m * n + k];
                }
            }
            for k in 0..n {
                qe[i * n + k] /= nbrs.len() as f64;
            }
        }
        v = qe;
    }

    // Column k -> rows with a nonzero weight on k.
    let inv: Vec<Vec<usize>> = (0..n)
        .map(|k| (0..n).filter(|&j| v[j * n + k] != 0.0).collect())
        .collect();
    let mut dist = vec![0.0; num_queries * n];
    for i in 0..num_queries {
        let mut tmin = vec![0.0f64; n];
        for k in 0..n {
            let vik = v[i * n + k];
            if vik == 0.0 {
                continue;
            }
            for &j in &inv[k] {
                tmin[j] += vik.min(v[j * n + k]);
            }
        }
        for j in 0..n {
            let jac = 1.0 - tmin[j] / (2.0 - tmin[j]);
            dist[i * n + j] = (1.0 - p.lambda) * jac + p.lambda * orig[i * n + j];
        }
    }
    cos.truncate(num_queries * n);
    (dist, cos)
}

/// Leave-one-out re-ranking: every store row is a probe against the store.
pub fn k_reciprocal_rerank_within(store: &EmbeddingStore, params: &RerankParams) -> Result<RerankedDistances> {
    params.validate(store.len())?;
    let all: Vec<&[f32]> = (0..store.len()).map(|i| store.row(i)).collect();
    let (distance, cosine) = rerank_all(&all, all.len(), params);
    Ok(RerankedDistances {
        num_queries: store.len(),
        gallery_size: store.len(),
        distance,
        cosine,
        within_store: true,
    })
}

/// Re-ranking of external queries against the store.
pub fn k_reciprocal_rerank(
    store: &EmbeddingStore,
    queries: &[Vec<f32>],
    params: &RerankParams,
) -> Result<RerankedDistances> {
    params.validate(store.len())?;
    let normalized = queries
        .iter()
        .map(|q| {
            if q.len() != store.dim() {
                return Err(Error::shape(format!(
                    "query has dimension {}, store has {}",
                    q.len(),
                    store.dim()
                )));
            }
            l2_normalized(q)
        })
        .collect::<Result<Vec<_>>>()?;
    let nq = normalized.len();
    let mut all: Vec<&[f32]> = normalized.iter().map(Vec::as_slice).collect();
    all.extend((0..store.len()).map(|i| store.row(i)));
    let (full, full_cos) = rerank_all(&all, nq, params);
    let n = all.len();
    let g = store.len();
    let slice = |m: &[f64]| -> Vec<f64> {
        (0..nq)
            .flat_map(|i| m[i * n + nq..(i + 1) * n].iter().copied())
            .collect()
    };
    Ok(RerankedDistances {
        num_queries: nq,
        gallery_size: g,
        distance: slice(&full),
        cosine: slice(&full_cos),
        within_store: false,
    })
}
