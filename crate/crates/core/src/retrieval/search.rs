use std::cmp::Ordering;

use serde::Serialize;

use super::store::{dot_f64, l2_normalized, EmbeddingStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub row: usize,
    pub patent_id: String,
    pub image_path: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_ref: Option<String>,
    pub hits: Vec<Hit>,
}

/// Descending score, then ascending row.
pub fn by_score_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Cosine score of `query` (normalized here) against every row.
pub fn cosine_scores(store: &EmbeddingStore, query: &[f32]) -> Result<Vec<f64>> {
    if query.len() != store.dim() {
        return Err(Error::shape(format!(
            "query has dimension {}, store has {}",
            query.len(),
            store.dim()
        )));
    }
    let q = l2_normalized(query)?;
    Ok((0..store.len()).map(|i| dot_f64(&q, store.row(i))).collect())
}

/// Row indices sorted by [`by_score_desc`].
pub fn rank_rows(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| by_score_desc((a, scores[a]), (b, scores[b])));
    idx
}

pub(crate) fn hits_from(store: &EmbeddingStore, order: &[usize], scores: &[f64], k: usize) -> Vec<Hit> {
    order
        .iter()
        .take(k)
        .map(|&row| Hit {
            row,
            patent_id: store.labels()[row].clone(),
            image_path: store.image_refs()[row].clone(),
            score: scores[row],
        })
        .collect()
}

/// Exhaustive top-`k` cosine search.
pub fn search(store: &EmbeddingStore, query: &[f32], k: usize) -> Result<RetrievalResult> {
    if k == 0 || k > store.len() {
        return Err(Error::invalid(format!(
            "k must lie in 1..={}, got {k}",
            store.len()
        )));
    }
    let scores = cosine_scores(store, query)?;
    let order = rank_rows(&scores);
    Ok(RetrievalResult {
        query_ref: None,
        hits: hits_from(store, &order, &scores, k),
    })
}
