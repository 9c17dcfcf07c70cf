use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, HeadKind, ModelConfig};

/// Learning-rate schedule. Only a constant rate is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, _iter: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset manifest; relative image paths resolve against its directory.
    pub manifest: Option<PathBuf>,
    pub augment: AugmentPolicy,
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub head_kind: HeadKind,
    pub scale: f64,
    pub margin: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Loss is logged every this many iterations.
    pub log_every: usize,
    /// Validation runs every this many iterations (0: only after the last).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            augment: AugmentPolicy::default(),
            backbone: BackboneConfig::full(),
            embed_dim: 512,
            head_kind: HeadKind::ArcFace,
            scale: 20.0,
            margin: 0.5,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 5e-4,
            batch_size: 128,
            max_iters: 20_000,
            seed: 0,
            log_every: 50,
            eval_every: 1000,
            eval_batch_size: 64,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe; identical to `Default`.
    pub fn full() -> Self {
        Self::default()
    }

    /// 64x64 drawings, four narrow stages, batch 64, 2000 iterations.
    pub fn toy() -> Self {
        Self {
            augment: AugmentPolicy::toy(),
            backbone: BackboneConfig::toy(),
            batch_size: 64,
            max_iters: 2000,
            eval_every: 500,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected toy or full)"))),
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            embed_dim: self.embed_dim,
            num_classes,
            head_kind: self.head_kind,
            scale: self.scale,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.model_config(2).validate()?;
        if self.augment.eval_size < self.backbone.min_input_size()
            || self.augment.crop_size < self.backbone.min_input_size()
        {
            return Err(Error::invalid("augment sizes are below the backbone's minimum input"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr must be positive and weight_decay nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batch norm"));
        }
        if self.max_iters == 0 || self.log_every == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("max_iters, log_every and eval_batch_size must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Path of the best-validation checkpoint: `x.prkt` becomes `x.best.prkt`.
    pub fn best_checkpoint_path(&self) -> Option<PathBuf> {
        self.checkpoint_path.as_ref().map(|p| best_path(p))
    }
}

pub fn best_path(p: &Path) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match p.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    p.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.max_iters), (1e-3, 5e-4, 128, 20_000));
        assert_eq!((c.scale, c.margin, c.embed_dim), (20.0, 0.5, 512));
        let t = TrainConfig::toy();
        assert_eq!((t.batch_size, t.max_iters, t.backbone.stage_channels.clone()), (64, 2000, vec![16, 32, 64, 128]));
        t.validate().unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let t = TrainConfig::toy();
        let back: TrainConfig = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9, "head_kind": "softmax"}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.head_kind, HeadKind::Softmax);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn best_path_naming() {
        assert_eq!(best_path(Path::new("out/model.prkt")), PathBuf::from("out/model.best.prkt"));
        assert_eq!(best_path(Path::new("model")), PathBuf::from("model.best"));
    }

    #[test]
    fn rejects_tiny_batches() {
        let mut c = TrainConfig::toy();
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}
