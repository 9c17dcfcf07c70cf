use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Initial value of every GeM exponent.
pub const GEM_P_INIT: f64 = 3.0;
/// Lower bound re-imposed on GeM exponents after each optimizer step.
pub const GEM_P_MIN: f64 = 0.05;
pub const GEM_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::ONE),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::ONE),
        }
    }

    fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update_running(&mut self, mean: &[T], var: &[T], momentum: T) {
        let keep = T::ONE - momentum;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// 3x3 conv (no bias) followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub stride: usize,
    pub bn: BatchNormParams<T>,
}

/// Every learnable tensor and running statistic of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    /// Stage-major: stage `s`, block `b` lives at `s * blocks_per_stage + b`.
    pub blocks: Vec<ConvBlock<T>>,
    /// Per-channel GeM exponents, shape `[n]`.
    pub gem_p: Tensor<T>,
    /// `[n, d]`
    pub fc_weight: Tensor<T>,
    /// `[d]`
    pub fc_bias: Tensor<T>,
    pub neck_bn: BatchNormParams<T>,
    /// `[d, C]`
    pub head_weight: Tensor<T>,
    /// `[C]`, softmax head only.
    pub head_bias: Option<Tensor<T>>,
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform weights, zero biases, identity batch norms.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = &config.backbone;
        let mut blocks = Vec::with_capacity(bb.num_stages() * bb.blocks_per_stage);
        let mut in_ch = 1;
        for &out_ch in &bb.stage_channels {
            for b in 0..bb.blocks_per_stage {
                let fan_in = (in_ch * 9) as f64;
                blocks.push(ConvBlock {
                    weight: uniform_tensor(&[out_ch, in_ch, 3, 3], (6.0 / fan_in).sqrt(), &mut rng),
                    stride: if b == 0 { 2 } else { 1 },
                    bn: BatchNormParams::identity(out_ch),
                });
                in_ch = out_ch;
            }
        }
        let (n, d, c) = (bb.out_channels(), config.embed_dim, config.num_classes);
        let fc_weight = uniform_tensor(&[n, d], 1.0 / (n as f64).sqrt(), &mut rng);
        let head_weight = uniform_tensor(&[d, c], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config: config.clone(),
            blocks,
            gem_p: Tensor::full([n], T::from_f64(GEM_P_INIT)),
            fc_weight,
            fc_bias: Tensor::zeros([d]),
            neck_bn: BatchNormParams::identity(d),
            head_weight,
            head_bias: (config.head_kind == HeadKind::Softmax).then(|| Tensor::zeros([c])),
        })
    }

    fn block_prefix(&self, i: usize) -> String {
        let per = self.config.backbone.blocks_per_stage;
        format!("backbone.s{}.b{}", i / per, i % per)
    }

    /// Learnable tensors in a fixed order with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = self.block_prefix(i);
            out.push((format!("{p}.conv.weight"), &b.weight));
            out.push((format!("{p}.bn.gamma"), &b.bn.gamma));
            out.push((format!("{p}.bn.beta"), &b.bn.beta));
        }
        out.push(("gem.p".into(), &self.gem_p));
        out.push(("neck.fc.weight".into(), &self.fc_weight));
        out.push(("neck.fc.bias".into(), &self.fc_bias));
        out.push(("neck.bn.gamma".into(), &self.neck_bn.gamma));
        out.push(("neck.bn.beta".into(), &self.neck_bn.beta));
        out.push(("head.weight".into(), &self.head_weight));
        if let Some(b) = &self.head_bias {
            out.push(("head.bias".into(), b));
        }
        out
    }

    /// Same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let prefixes: Vec<String> = (0..self.blocks.len()).map(|i| self.block_prefix(i)).collect();
        let mut out = Vec::new();
        for (b, p) in self.blocks.iter_mut().zip(prefixes) {
            out.push((format!("{p}.conv.weight"), &mut b.weight));
            out.push((format!("{p}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("{p}.bn.beta"), &mut b.bn.beta));
        }
        out.push(("gem.p".into(), &mut self.gem_p));
        out.push(("neck.fc.weight".into(), &mut self.fc_weight));
        out.push(("neck.fc.bias".into(), &mut self.fc_bias));
        out.push(("neck.bn.gamma".into(), &mut self.neck_bn.gamma));
        out.push(("neck.bn.beta".into(), &mut self.neck_bn.beta));
        out.push(("head.weight".into(), &mut self.head_weight));
        if let Some(b) = &mut self.head_bias {
            out.push(("head.bias".into(), b));
        }
        out
    }

    /// Running statistics, which are saved but never optimized.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = self.block_prefix(i);
            out.push((format!("{p}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &b.bn.running_var));
        }
        out.push(("neck.bn.running_mean".into(), &self.neck_bn.running_mean));
        out.push(("neck.bn.running_var".into(), &self.neck_bn.running_var));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let prefixes: Vec<String> = (0..self.blocks.len()).map(|i| self.block_prefix(i)).collect();
        let mut out = Vec::new();
        for (b, p) in self.blocks.iter_mut().zip(prefixes) {
            out.push((format!("{p}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &mut b.bn.running_var));
        }
        out.push(("neck.bn.running_mean".into(), &mut self.neck_bn.running_mean));
        out.push(("neck.bn.running_var".into(), &mut self.neck_bn.running_var));
        out
    }

    /// Batch norms in forward order: backbone blocks, then the neck.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams<T>> {
        let mut out: Vec<_> = self.blocks.iter_mut().map(|b| &mut b.bn).collect();
        out.push(&mut self.neck_bn);
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn clamp_gem_p(&mut self) {
        let lo = T::from_f64(GEM_P_MIN);
        for p in self.gem_p.data_mut() {
            *p = p.max(lo);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    weight: b.weight.cast(),
                    stride: b.stride,
                    bn: b.bn.cast(),
                })
                .collect(),
            gem_p: self.gem_p.cast(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
            neck_bn: self.neck_bn.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.as_ref().map(Tensor::cast),
        }
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// a freshly initialized model of `config`.
    pub fn from_named(config: &ModelConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let mut fill = |name: &str, slot: &mut Tensor<T>| -> Result<()> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            Ok(())
        };
        for (name, slot) in params.trainable_mut() {
            fill(&name, slot)?;
        }
        for (name, slot) in params.buffers_mut() {
            fill(&name, slot)?;
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        Ok(params)
    }
}
