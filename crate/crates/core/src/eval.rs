//! Leave-one-out retrieval metrics: mAP and Rank-N.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{dot_f64, k_reciprocal_rerank_within, rank_rows, EmbeddingStore, RerankParams};

pub const RANKS: [usize; 3] = [1, 5, 20];
pub const PROTOCOL: &str = "leave-one-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Fraction of queries with a relevant item in the top N, keyed by N.
    pub rank_accuracy: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub protocol: String,
    pub rerank: Option<RerankParams>,
}

impl MetricsReport {
    pub fn rank(&self, n: usize) -> Option<f64> {
        self.rank_accuracy.get(&n).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with percentages.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:<14}{:>8}", "Method", "mAP");
        let name = if self.rerank.is_some() { "model+rerank" } else { "model" };
        let mut row = format!("{:<14}{:>8.1}", name, 100.0 * self.map);
        for (n, v) in &self.rank_accuracy {
            let _ = write!(head, "{:>9}", format!("Rank-{n}"));
            let _ = write!(row, "{:>9.1}", 100.0 * v);
        }
        format!(
            "{head}\n{row}\n({} queries, {} protocol)\n",
            self.num_queries, self.protocol
        )
    }
}

/// Non-interpolated AP of a ranked list of relevance flags.
pub fn average_precision(flags: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / num_relevant as f64)
}

/// Labels occurring on exactly one row.
pub fn singleton_labels(labels: &[String]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c < 2)
        .map(|(l, _)| l.to_string())
        .collect()
}

/// Leave-one-out evaluation: each row queries all others, same label is relevant.
pub fn evaluate(store: &EmbeddingStore, rerank: Option<&RerankParams>) -> Result<MetricsReport> {
    let labels = store.labels();
    let lonely = singleton_labels(labels);
    if !lonely.is_empty() {
        return Err(Error::invalid(format!(
            "patent ids with a single image cannot be evaluated: {}",
            lonely.join(", ")
        )));
    }
    let r = store.len();
    let reranked = rerank.map(|p| k_reciprocal_rerank_within(store, p)).transpose()?;
    let mut ap_sum = 0.0;
    let mut rank_hits = [0usize; RANKS.len()];
    for q in 0..r {
        let order: Vec<usize> = match &reranked {
            Some(rr) => rr.ranking(q),
            None => {
                let scores: Vec<f64> = (0..r).map(|j| dot_f64(store.row(q), store.row(j))).collect();
                rank_rows(&scores).into_iter().filter(|&j| j != q).collect()
            }
        };
        let flags: Vec<bool> = order.iter().map(|&j| labels[j] == labels[q]).collect();
        let num_rel = flags.iter().filter(|&&f| f).count();
        ap_sum += average_precision(&flags, num_rel)?;
        let first = flags.iter().position(|&f| f).expect("relevant item present");
        for (slot, &n) in rank_hits.iter_mut().zip(&RANKS) {
            if first < n {
                *slot += 1;
            }
        }
    }
    Ok(MetricsReport {
        map: ap_sum / r as f64,
        rank_accuracy: RANKS
            .iter()
            .zip(rank_hits)
            .map(|(&n, h)| (n, h as f64 / r as f64))
            .collect(),
        num_queries: r,
        protocol: PROTOCOL.to_string(),
        rerank: rerank.copied(),
    })
}
