//! Frozen model plus gallery, shared by `search` and `serve`.

use std::path::Path;

use prkt_core::dataset::{decode_gray, DrawingImage};
use prkt_core::model::{extract_features, ModelParams};
use prkt_core::retrieval::{eval_batch, k_reciprocal_rerank, search, EmbeddingStore, Hit, RerankParams};
use prkt_core::train::{load_checkpoint_with_fingerprint, Checkpoint};

use crate::{CliError, Result};

#[derive(Debug)]
pub struct Engine {
    pub params: ModelParams,
    pub store: EmbeddingStore,
    pub eval_size: usize,
    pub fingerprint: String,
}

/// Canvas size the checkpoint was evaluated at.
pub fn eval_size(ck: &Checkpoint) -> usize {
    ck.train_config
        .as_ref()
        .map_or(ck.params.config.backbone.input_size, |c| c.augment.eval_size)
}

/// Hits plus the number actually returned after clamping to the gallery.
#[derive(Clone, Debug)]
pub struct Ranked {
    pub hits: Vec<Hit>,
    pub k: usize,
    pub clamped: bool,
}

impl Engine {
    /// Loads both artifacts and refuses an embedding file recorded against
    /// a different checkpoint.
    pub fn load(checkpoint: &Path, embeddings: &Path) -> Result<Self> {
        let (ck, fingerprint) = load_checkpoint_with_fingerprint(checkpoint)?;
        let store = EmbeddingStore::load(embeddings)?;
        if let Some(fp) = &store.fingerprint {
            if *fp != fingerprint {
                return Err(CliError::Usage(format!(
                    "{} was embedded with checkpoint {fp}, but {} is {fingerprint}",
                    embeddings.display(),
                    checkpoint.display()
                )));
            }
        }
        if store.dim() != ck.params.config.embed_dim {
            return Err(CliError::Usage(format!(
                "embedding dimension {} does not match the checkpoint's {}",
                store.dim(),
                ck.params.config.embed_dim
            )));
        }
        Ok(Self {
            eval_size: eval_size(&ck),
            params: ck.params,
            store,
            fingerprint,
        })
    }

    pub fn embed_image(&self, img: &DrawingImage) -> Result<Vec<f32>> {
        let batch = eval_batch(&[img], self.eval_size)?;
        Ok(extract_features(&self.params, batch)?.into_data())
    }

    pub fn embed_bytes(&self, bytes: &[u8]) -> Result<Vec<f32>> {
        let (w, h, px) = decode_gray(bytes).map_err(|reason| CliError::Usage(format!("query image: {reason}")))?;
        self.embed_image(&DrawingImage::new(w, h, px, "", 0)?)
    }

    pub fn embed_file(&self, path: &Path) -> Result<Vec<f32>> {
        self.embed_image(&DrawingImage::load(path, "", 0)?)
    }

    /// Top-`k` gallery rows for `query`, optionally re-ranked.
    pub fn rank(&self, query: &[f32], k: usize, rerank: Option<&RerankParams>) -> Result<Ranked> {
        if k == 0 {
            return Err(CliError::Usage("k must be at least 1".into()));
        }
        let r = self.store.len();
        let (k, clamped) = if k > r { (r, true) } else { (k, false) };
        let hits = match rerank {
            None => search(&self.store, query, k)?.hits,
            Some(p) => k_reciprocal_rerank(&self.store, &[query.to_vec()], p)?.hits(&self.store, 0, k),
        };
        Ok(Ranked { hits, k, clamped })
    }
}
