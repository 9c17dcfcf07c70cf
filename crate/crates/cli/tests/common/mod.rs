#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prkt_core::dataset::{generate_synthetic, SyntheticConfig};
use prkt_core::train::TrainConfig;

/// A model small enough to train in well under a second.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.backbone.stage_channels = vec![4, 8];
    c.backbone.input_size = 32;
    c.augment.crop_size = 28;
    c.augment.eval_size = 32;
    c.augment.translate_max = 2;
    c.embed_dim = 16;
    c.batch_size = 8;
    c.max_iters = 20;
    c.log_every = 5;
    c.eval_every = 10;
    c
}

pub struct Artifacts {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

impl Artifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Synthetic data plus a tiny training config, written to a fresh directory.
pub fn setup() -> Artifacts {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut gen = SyntheticConfig::new(6, 4, 1);
    gen.image_size = 32;
    gen.val_fraction = Some(0.5);
    generate_synthetic(&gen, &data).unwrap();
    let config = dir.path().join("tiny.json");
    tiny_config().save(&config).unwrap();
    Artifacts {
        manifest: data.join("manifest.jsonl"),
        data,
        config,
        dir,
    }
}

pub fn first_image(data: &Path) -> String {
    let text = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["image_path"].as_str().unwrap().to_string()
}
