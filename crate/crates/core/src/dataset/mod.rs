//! Drawing images, manifests and the synthetic benchmark generator.

mod image;
mod manifest;
mod synthetic;

pub use image::{decode_gray, encode_png, DrawingImage, BACKGROUND, INK, INK_THRESHOLD};
pub use manifest::{
    load_manifest, parse_manifest, split_by_id, DatasetManifest, ManifestEntry, Split,
};
pub use synthetic::{generate_synthetic, patent_id, render_all, render_split, render_view, SyntheticConfig};
