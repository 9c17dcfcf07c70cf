use super::store::EmbeddingStore;
use crate::augment::{center_fit, normalize};
use crate::dataset::{DatasetManifest, DrawingImage, Split, BACKGROUND};
use crate::error::{Error, Result};
use crate::model::{extract_features, ModelParams};
use crate::tensor::Tensor;

/// Stacks eval-normalized images into a `[N,1,S,S]` batch.
pub fn eval_batch(images: &[&DrawingImage], eval_size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * eval_size * eval_size);
    for img in images {
        data.extend(normalize(&center_fit(img, eval_size, BACKGROUND)).into_data());
    }
    Tensor::new([images.len(), 1, eval_size, eval_size], data)
}

/// Raw (unnormalized) retrieval features `[N,d]`, computed `batch_size` at a time.
pub fn embed_images(
    params: &ModelParams,
    images: &[DrawingImage],
    eval_size: usize,
    batch_size: usize,
) -> Result<Tensor> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let d = params.config.embed_dim;
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(batch_size) {
        let refs: Vec<&DrawingImage> = chunk.iter().collect();
        let feats = extract_features(params, eval_batch(&refs, eval_size)?)?;
        out.extend_from_slice(feats.data());
    }
    Tensor::new([images.len(), d], out)
}

/// Embeds the images of `split` (or all entries) in manifest order.
pub fn embed_dataset(
    params: &ModelParams,
    manifest: &DatasetManifest,
    split: Option<Split>,
    eval_size: usize,
    batch_size: usize,
) -> Result<EmbeddingStore> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    if entries.is_empty() {
        return Err(Error::invalid("no images to embed in the selected split"));
    }
    let images = entries
        .iter()
        .map(|e| DrawingImage::load(&manifest.resolve(e), e.patent_id.clone(), e.view_index))
        .collect::<Result<Vec<_>>>()?;
    let feats = embed_images(params, &images, eval_size, batch_size)?;
    EmbeddingStore::new(
        &feats,
        entries.iter().map(|e| e.patent_id.clone()).collect(),
        entries.iter().map(|e| e.image_path.clone()).collect(),
    )
}
