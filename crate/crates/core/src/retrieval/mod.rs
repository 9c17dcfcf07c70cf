//! Embedding store, exhaustive cosine search and k-reciprocal re-ranking.

mod embed;
mod rerank;
mod search;
mod store;

pub use embed::{embed_dataset, embed_images, eval_batch};
pub use rerank::{k_reciprocal_rerank, k_reciprocal_rerank_within, RerankParams, RerankedDistances};
pub use search::{by_score_desc, cosine_scores, rank_rows, search, Hit, RetrievalResult};
pub use store::{dot_f64, fingerprint_path, l2_normalized, EmbeddingStore, NORM_TOLERANCE};
