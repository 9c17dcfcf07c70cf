use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    ArcFace,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Softmax => "softmax",
            HeadKind::ArcFace => "arcface",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "arcface" => Ok(HeadKind::ArcFace),
            other => Err(Error::invalid(format!(
                "unknown head kind `{other}` (expected softmax or arcface)"
            ))),
        }
    }
}

/// Plain 3x3 convnet. Each stage halves the resolution with its first block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            input_size: 64,
        }
    }

    pub fn full() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: 2,
            input_size: 256,
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Smallest side accepted by the forward pass.
    pub fn min_input_size(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::invalid("backbone needs at least 2 stages"));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::invalid("stage widths and blocks_per_stage must be positive"));
        }
        if self.input_size < self.min_input_size() {
            return Err(Error::invalid(format!(
                "input size {} is below the minimum {} for {} stages",
                self.input_size,
                self.min_input_size(),
                self.num_stages()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub head_kind: HeadKind,
    /// ArcFace logit scale `s`.
    pub scale: f64,
    /// ArcFace additive angular margin in radians.
    pub margin: f64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, embed_dim: usize, num_classes: usize, head_kind: HeadKind) -> Self {
        Self {
            backbone,
            embed_dim,
            num_classes,
            head_kind,
            scale: 20.0,
            margin: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("the head needs at least 2 classes"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::invalid(format!("margin must lie in [0, pi), got {}", self.margin)));
        }
        Ok(())
    }
}
