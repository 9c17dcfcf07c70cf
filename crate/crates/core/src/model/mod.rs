//! Backbone, GeM pooling, FC+BN neck and the two classification heads.

mod config;
mod forward;
mod params;

pub use config::{BackboneConfig, HeadKind, ModelConfig};
pub use forward::{
    arcface_logits, arcface_loss, backbone_forward, extract_features, forward, head_loss,
    neck_forward, softmax_ce_loss, update_running_stats, BoundParams, ForwardOutput,
};
pub use params::{
    BatchNormParams, ConvBlock, ModelParams, BN_EPS, BN_MOMENTUM, GEM_EPS, GEM_P_INIT, GEM_P_MIN,
};
