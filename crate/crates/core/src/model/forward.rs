use super::config::HeadKind;
use super::params::{ModelParams, BN_EPS, GEM_EPS};
use crate::augment::Mode;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, Tensor, Var};

/// Graph handles for every parameter of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    /// Per block: conv weight, bn gamma, bn beta.
    pub blocks: Vec<[Var; 3]>,
    pub gem_p: Var,
    pub fc_weight: Var,
    pub fc_bias: Var,
    pub neck_gamma: Var,
    pub neck_beta: Var,
    pub head_weight: Var,
    pub head_bias: Option<Var>,
}

impl BoundParams {
    /// Places all parameters on `g`, as tracked leaves when `trainable`.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let blocks = params
            .blocks
            .iter()
            .map(|b| [leaf(&b.weight), leaf(&b.bn.gamma), leaf(&b.bn.beta)])
            .collect();
        Self {
            blocks,
            gem_p: leaf(&params.gem_p),
            fc_weight: leaf(&params.fc_weight),
            fc_bias: leaf(&params.fc_bias),
            neck_gamma: leaf(&params.neck_bn.gamma),
            neck_beta: leaf(&params.neck_bn.beta),
            head_weight: leaf(&params.head_weight),
            head_bias: params.head_bias.as_ref().map(leaf),
        }
    }

    /// Handles in [`ModelParams::trainable`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flatten().copied().collect();
        out.extend([
            self.gem_p,
            self.fc_weight,
            self.fc_bias,
            self.neck_gamma,
            self.neck_beta,
            self.head_weight,
        ]);
        out.extend(self.head_bias);
        out
    }
}

pub struct ForwardOutput<T: Scalar> {
    /// Pre-BN FC output, used for retrieval.
    pub feature: Var,
    /// BN output, consumed only by the head.
    pub head_input: Var,
    /// Train-mode statistics of every batch norm in forward order.
    pub batch_stats: Vec<BatchStats<T>>,
}

fn batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: (&Tensor<T>, &Tensor<T>),
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<Var> {
    let eps = T::from_f64(BN_EPS);
    match mode {
        Mode::Train => {
            let (y, s) = g.batch_norm_train(x, gamma, beta, eps)?;
            stats.push(s);
            Ok(y)
        }
        Mode::Eval => g.batch_norm_eval(x, gamma, beta, running.0.data(), running.1.data(), eps),
    }
}

/// `[N,1,H,W]` images to ReLU feature maps `[N,n,h,w]`.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    input: Var,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<Var> {
    let shape = g.value(input).shape().to_vec();
    let min = params.config.backbone.min_input_size();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape(format!("backbone expects [N,1,H,W], got {shape:?}")));
    }
    if shape[2] < min || shape[3] < min {
        return Err(Error::shape(format!(
            "input {}x{} is below the {min}x{min} minimum of this backbone",
            shape[2], shape[3]
        )));
    }
    let mut x = input;
    for (block, vars) in params.blocks.iter().zip(&bound.blocks) {
        let [w, gamma, beta] = *vars;
        let y = g.conv2d(x, w, block.stride, 1)?;
        let running = (&block.bn.running_mean, &block.bn.running_var);
        let y = batch_norm(g, y, gamma, beta, running, mode, stats)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// FC then BN. Returns `(feature, head_input)`.
pub fn neck_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    pooled: Var,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<(Var, Var)> {
    let fc = g.matmul(pooled, bound.fc_weight)?;
    let feature = g.add(fc, bound.fc_bias)?;
    let running = (&params.neck_bn.running_mean, &params.neck_bn.running_var);
    let head_input = batch_norm(g, feature, bound.neck_gamma, bound.neck_beta, running, mode, stats)?;
    Ok((feature, head_input))
}

pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    input: Var,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let mut batch_stats = Vec::new();
    let maps = backbone_forward(g, params, bound, input, mode, &mut batch_stats)?;
    let pooled = g.gem_pool(maps, bound.gem_p, T::from_f64(GEM_EPS))?;
    let (feature, head_input) = neck_forward(g, params, bound, pooled, mode, &mut batch_stats)?;
    Ok(ForwardOutput {
        feature,
        head_input,
        batch_stats,
    })
}

/// Mean cross-entropy of `x W + b`.
pub fn softmax_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    head_input: Var,
    labels: &[usize],
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let logits = g.matmul(head_input, weight)?;
    let logits = g.add(logits, bias)?;
    g.cross_entropy(logits, labels)
}

/// ArcFace logits `[N,C]` over L2-normalized features and class columns.
pub fn arcface_logits<T: Scalar>(
    g: &mut Graph<T>,
    head_input: Var,
    labels: &[usize],
    weight: Var,
    scale: T,
    margin: T,
) -> Result<Var> {
    let xn = g.l2_normalize(head_input, 1)?;
    let wn = g.l2_normalize(weight, 0)?;
    let cos = g.matmul(xn, wn)?;
    g.arc_margin(cos, labels, scale, margin)
}

pub fn arcface_loss<T: Scalar>(
    g: &mut Graph<T>,
    head_input: Var,
    labels: &[usize],
    weight: Var,
    scale: T,
    margin: T,
) -> Result<Var> {
    let logits = arcface_logits(g, head_input, labels, weight, scale, margin)?;
    g.cross_entropy(logits, labels)
}

/// Loss of whichever head `params` is configured with.
pub fn head_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    head_input: Var,
    labels: &[usize],
) -> Result<Var> {
    let cfg = &params.config;
    match (cfg.head_kind, bound.head_bias) {
        (HeadKind::Softmax, Some(b)) => softmax_ce_loss(g, head_input, labels, bound.head_weight, b),
        (HeadKind::Softmax, None) => Err(Error::invalid("softmax head is missing its bias")),
        (HeadKind::ArcFace, _) => arcface_loss(
            g,
            head_input,
            labels,
            bound.head_weight,
            T::from_f64(cfg.scale),
            T::from_f64(cfg.margin),
        ),
    }
}

/// Folds train-mode statistics into the running averages.
pub fn update_running_stats<T: Scalar>(params: &mut ModelParams<T>, stats: &[BatchStats<T>], momentum: T) -> Result<()> {
    let bns = params.batch_norms_mut();
    if bns.len() != stats.len() {
        return Err(Error::invalid(format!(
            "expected {} batch-norm statistics, got {}",
            bns.len(),
            stats.len()
        )));
    }
    for (bn, s) in bns.into_iter().zip(stats) {
        bn.update_running(&s.mean, &s.var, momentum);
    }
    Ok(())
}

/// Eval-mode retrieval features `[N,d]` for a `[N,1,H,W]` batch.
pub fn extract_features<T: Scalar>(params: &ModelParams<T>, batch: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let input = g.constant(batch);
    let out = forward(&mut g, params, &bound, input, Mode::Eval)?;
    Ok(g.value(out.feature).clone())
}
