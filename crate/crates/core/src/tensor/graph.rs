//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse pass.

use super::conv::{self, ConvGeometry};
use super::{matmul_raw, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a train-mode batch norm. `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        channels: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Power(Var, T),
    Log(Var),
    Exp(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        cols: Vec<T>,
        geom: ConvGeometry,
    },
    Gem {
        x: Var,
        p: Var,
        eps: T,
    },
    ArcMargin {
        cos: Var,
        labels: Vec<usize>,
        scale: T,
        margin: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of primitive operations for one forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower/upper clamp applied to cosines before `acos`.
const ACOS_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor {
                shape: self.nodes[v.0].value.shape.clone(),
                data: g.clone(),
            })
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Appends a computed node, dropping the recorded op when no input is tracked.
    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if tracked {
            self.push(value, true, op)
        } else {
            self.push(value, false, Op::Leaf)
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new([m, n], out)?;
        Ok(self.record(value, &[a, b], Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may also be a trailing-suffix shape broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add of {sa:?} and {sb:?}")));
        }
        let bl = self.data(b).len().max(1);
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bl])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.record(value, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.record(value, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.record(value, &[a], Op::Relu(a))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(format!("batch norm expects [N,C,...], got {s:?}")));
        }
        let channels = s[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::shape(format!(
                "batch norm affine params must be [{channels}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((s[0], channels, s[2..].iter().product()))
    }

    /// Normalizes each channel of `[N,C,...]` with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, channels, inner) = self.bn_layout(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let count = n * inner;
        let cnt = T::from_usize(count);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut mean = vec![T::ZERO; channels];
        let mut var = vec![T::ZERO; channels];
        for s in 0..n {
            for c in 0..channels {
                let base = (s * channels + c) * inner;
                mean[c] += lane_sum(&xd[base..base + inner]);
            }
        }
        for m in &mut mean {
            *m = *m / cnt;
        }
        for s in 0..n {
            for c in 0..channels {
                let base = (s * channels + c) * inner;
                var[c] += lane_sq_dev(&xd[base..base + inner], mean[c]);
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / cnt).collect();
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| v / T::from_usize(count - 1))
            .collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (xhat, out) = bn_apply(xd, &mean, &inv_std, gd, bd, channels, inner);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.record(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
                channels,
                inner,
            },
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Normalizes each channel with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, channels, inner) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::shape("batch norm running statistics length mismatch"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::ONE / (v + eps).sqrt())
            .collect();
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let (xhat, out) = bn_apply(xd, running_mean, &inv_std, gd, bd, channels, inner);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
                channels,
                inner,
            },
        ))
    }

    /// Scales each row (`axis = 1`) or column (`axis = 0`) of a 2-D tensor to
    /// unit L2 norm. A 1-D tensor is treated as one vector.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::shape(format!("l2_normalize expects 1-D or 2-D, got {s:?}"))),
        };
        if axis > 1 || (s.len() == 1 && axis != 1) {
            return Err(Error::invalid(format!("l2_normalize axis {axis} for shape {s:?}")));
        }
        let xd = self.data(x);
        let nvec = if axis == 1 { rows } else { cols };
        let mut norms = vec![T::ZERO; nvec];
        for r in 0..rows {
            for c in 0..cols {
                let v = xd[r * cols + c];
                norms[if axis == 1 { r } else { c }] += v * v;
            }
        }
        for (i, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if !(*n > T::ZERO) || !n.is_finite() {
                return Err(Error::invalid(format!(
                    "l2_normalize: vector {i} has zero or non-finite norm"
                )));
            }
        }
        let mut out = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] / norms[if axis == 1 { r } else { c }];
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.record(value, &[x], Op::L2Normalize { x, axis, norms }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(value, &[x], Op::Reshape(x)))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let total = d.iter().fold(T::ZERO, |acc, &v| acc + v);
        let value = Tensor::scalar(total / T::from_usize(d.len().max(1)));
        self.record(value, &[x], Op::Mean(x))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().fold(T::ZERO, |acc, &v| acc + v);
        self.record(Tensor::scalar(total), &[x], Op::Sum(x))
    }

    /// Elementwise `x^p` for a fixed exponent.
    pub fn power(&mut self, x: Var, p: T) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        self.record(value, &[x], Op::Power(x, p))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(Scalar::ln);
        self.record(value, &[x], Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(Scalar::exp);
        self.record(value, &[x], Op::Exp(x))
    }

    /// Max pooling over `[N,C,H,W]` without padding. Ties go to the first maximum.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
            return Err(Error::shape(format!(
                "max_pool2d kernel {kernel} stride {stride} on {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let xd = self.data(x);
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([s[0], s[1], oh, ow], out)?;
        Ok(self.record(value, &[x], Op::MaxPool { x, argmax }))
    }

    /// Cross-correlation of `[N,C,H,W]` input with a `[K,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, pad)?;
        let cols = conv::im2col(self.data(input), &geom);
        let out = conv::conv_forward(&cols, self.data(kernel), &geom);
        let value = Tensor::new(geom.output_shape(), out)?;
        let tracked = self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad;
        let cols = if tracked { cols } else { Vec::new() };
        Ok(self.record(
            value,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                cols,
                geom,
            },
        ))
    }

    /// Generalized-mean pooling of `[N,C,H,W]` feature maps with a per-channel
    /// exponent `p` of shape `[C]`: `(mean(max(x, eps)^p))^(1/p)`.
    pub fn gem_pool(&mut self, x: Var, p: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("gem_pool expects [N,C,H,W], got {s:?}")));
        }
        let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
        if self.shape(p) != [c] {
            return Err(Error::shape(format!(
                "gem_pool exponent must be [{c}], got {:?}",
                self.shape(p)
            )));
        }
        if inner == 0 {
            return Err(Error::shape("gem_pool over empty spatial extent"));
        }
        let pd = self.data(p);
        if let Some(bad) = pd.iter().position(|&v| !(v > T::ZERO)) {
            return Err(Error::invalid(format!("gem_pool exponent p[{bad}] must be positive")));
        }
        let xd = self.data(x);
        if xd.iter().any(|&v| v < T::ZERO) {
            return Err(Error::invalid("gem_pool input must be nonnegative"));
        }
        let mut out = vec![T::ZERO; n * c];
        for s_ in 0..n {
            for ch in 0..c {
                let plane = &xd[(s_ * c + ch) * inner..(s_ * c + ch + 1) * inner];
                out[s_ * c + ch] = gem_value(plane, pd[ch], eps);
            }
        }
        let value = Tensor::new([n, c], out)?;
        Ok(self.record(value, &[x, p], Op::Gem { x, p, eps }))
    }

    /// ArcFace logits from a `[N,C]` cosine matrix: `s*cos(theta_y + m)` on
    /// the label column, `s*cos(theta_j)` elsewhere.
    pub fn arc_margin(&mut self, cos: Var, labels: &[usize], scale: T, margin: T) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        check_labels(&s, labels)?;
        let cols = s[1];
        let lo = T::from_f64(-1.0 + ACOS_CLAMP);
        let hi = T::from_f64(1.0 - ACOS_CLAMP);
        let mut out: Vec<T> = self.data(cos).iter().map(|&c| scale * c).collect();
        let cd = self.data(cos);
        // cos(acos(c)) is not bitwise c, so a zero margin skips the round trip.
        if margin != T::ZERO {
            for (r, &y) in labels.iter().enumerate() {
                let c = cd[r * cols + y].max(lo).min(hi);
                out[r * cols + y] = scale * (c.acos() + margin).cos();
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.record(
            value,
            &[cos],
            Op::ArcMargin {
                cos,
                labels: labels.to_vec(),
                scale,
                margin,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[N,C]` logits, max-subtracted.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        check_labels(&s, labels)?;
        let (n, c) = (s[0], s[1]);
        let ld = self.data(logits);
        let mut probs = vec![T::ZERO; n * c];
        let mut total = T::ZERO;
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let mx = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut z = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / z;
            }
            total += z.ln() + mx - row[labels[r]];
        }
        let value = Tensor::scalar(total / T::from_usize(n));
        Ok(self.record(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Fills gradients of the scalar `loss` w.r.t. every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(gout) = hi[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            backward_node(&self.nodes, node, gout, lo);
        }
        Ok(())
    }
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 2 {
        return Err(Error::shape(format!("expected [N,C] scores, got {shape:?}")));
    }
    if labels.len() != shape[0] {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            shape[0]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(())
}

const LANES: usize = 8;

/// Sum with independent partial accumulators so the loop vectorizes.
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            acc[i] += ch[i];
        }
    }
    let mut total = acc.iter().fold(T::ZERO, |a, &b| a + b);
    for &v in rest {
        total += v;
    }
    total
}

fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let cx = xs.chunks_exact(LANES);
    let cy = ys.chunks_exact(LANES);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for i in 0..LANES {
            acc[i] += a[i] * b[i];
        }
    }
    let mut total = acc.iter().fold(T::ZERO, |a, &b| a + b);
    for (&a, &b) in rx.iter().zip(ry) {
        total += a * b;
    }
    total
}

fn lane_sq_dev<T: Scalar>(xs: &[T], mean: T) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            let d = ch[i] - mean;
            acc[i] += d * d;
        }
    }
    let mut total = acc.iter().fold(T::ZERO, |a, &b| a + b);
    for &v in rest {
        total += (v - mean) * (v - mean);
    }
    total
}

/// Returns `(xhat, gamma * xhat + beta)` for `[N,C,inner]` data.
fn bn_apply<T: Scalar>(
    xd: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    channels: usize,
    inner: usize,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut out = vec![T::ZERO; xd.len()];
    for (blk, ((src, hs), os)) in xd
        .chunks_exact(inner.max(1))
        .zip(xhat.chunks_exact_mut(inner.max(1)))
        .zip(out.chunks_exact_mut(inner.max(1)))
        .enumerate()
    {
        let c = blk % channels;
        let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for ((&v, h), o) in src.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
            let t = (v - m) * is;
            *h = t;
            *o = g * t + b;
        }
    }
    (xhat, out)
}

/// `peak * mean((max(x,eps)/peak)^p)^(1/p)` with `peak` the largest floored
/// input, which keeps the powers in `(0, 1]`.
fn gem_value<T: Scalar>(plane: &[T], p: T, eps: T) -> T {
    let peak = plane.iter().fold(eps, |a, &v| a.max(v));
    let mut acc = T::ZERO;
    for &v in plane {
        acc += (v.max(eps) / peak).powf(p);
    }
    let q = acc / T::from_usize(plane.len());
    peak * q.powf(T::ONE / p)
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    let tracked = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            if tracked(*a) {
                let mut da = vec![T::ZERO; m * k];
                // da[m,k] = g[m,n] * b^T
                unsafe {
                    T::gemm(
                        m, n, k, T::ONE,
                        gout.as_ptr(), n as isize, 1,
                        bv.data.as_ptr(), 1, n as isize,
                        T::ZERO, da.as_mut_ptr(), k as isize, 1,
                    );
                }
                accumulate(nodes, grads, *a, da);
            }
            if tracked(*b) {
                let mut db = vec![T::ZERO; k * n];
                // db[k,n] = a^T * g
                unsafe {
                    T::gemm(
                        k, m, n, T::ONE,
                        av.data.as_ptr(), 1, k as isize,
                        gout.as_ptr(), n as isize, 1,
                        T::ZERO, db.as_mut_ptr(), n as isize, 1,
                    );
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            if tracked(*a) {
                accumulate(nodes, grads, *a, gout.to_vec());
            }
            if tracked(*b) {
                let bl = val(*b).data.len().max(1);
                let mut db = vec![T::ZERO; bl];
                for (i, &g) in gout.iter().enumerate() {
                    db[i % bl] += g;
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Mul(a, b) => {
            if tracked(*a) {
                let d = gout.iter().zip(&val(*b).data).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, grads, *a, d);
            }
            if tracked(*b) {
                let d = gout.iter().zip(&val(*a).data).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::Scale(a, c) => {
            let d = gout.iter().map(|&g| g * *c).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Relu(a) => {
            let d = gout
                .iter()
                .zip(&val(*a).data)
                .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            channels,
            inner,
        } => {
            let (channels, inner) = (*channels, *inner);
            let n = gout.len() / (channels * inner).max(1);
            let gd = &val(*gamma).data;
            let mut dgamma = vec![T::ZERO; channels];
            let mut dbeta = vec![T::ZERO; channels];
            for s in 0..n {
                for c in 0..channels {
                    let r = (s * channels + c) * inner..(s * channels + c + 1) * inner;
                    dgamma[c] += lane_dot(&gout[r.clone()], &xhat[r.clone()]);
                    dbeta[c] += lane_sum(&gout[r]);
                }
            }
            if tracked(*x) {
                let mut dx = vec![T::ZERO; gout.len()];
                let m = T::from_usize(n * inner);
                for s in 0..n {
                    for c in 0..channels {
                        let r = (s * channels + c) * inner..(s * channels + c + 1) * inner;
                        let (dxs, gs, hs) = (&mut dx[r.clone()], &gout[r.clone()], &xhat[r]);
                        if *train {
                            let k = gd[c] * inv_std[c] / m;
                            let (db, dg) = (dbeta[c], dgamma[c]);
                            for ((d, &g), &h) in dxs.iter_mut().zip(gs).zip(hs) {
                                *d = k * (m * g - db - h * dg);
                            }
                        } else {
                            let k = gd[c] * inv_std[c];
                            for (d, &g) in dxs.iter_mut().zip(gs) {
                                *d = k * g;
                            }
                        }
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::L2Normalize { x, axis, norms } => {
            let y = &node.value;
            let (rows, cols) = if y.shape.len() == 1 {
                (1, y.shape[0])
            } else {
                (y.shape[0], y.shape[1])
            };
            let mut dots = vec![T::ZERO; norms.len()];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    dots[if *axis == 1 { r } else { c }] += y.data[i] * gout[i];
                }
            }
            let mut dx = vec![T::ZERO; gout.len()];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    let j = if *axis == 1 { r } else { c };
                    dx[i] = (gout[i] - y.data[i] * dots[j]) / norms[j];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, gout.to_vec()),
        Op::Mean(x) => {
            let n = val(*x).data.len();
            accumulate(nodes, grads, *x, vec![gout[0] / T::from_usize(n.max(1)); n]);
        }
        Op::Sum(x) => {
            let n = val(*x).data.len();
            accumulate(nodes, grads, *x, vec![gout[0]; n]);
        }
        Op::Power(x, p) => {
            let pm1 = *p - T::ONE;
            let d = gout
                .iter()
                .zip(&val(*x).data)
                .map(|(&g, &v)| g * *p * v.powf(pm1))
                .collect();
            accumulate(nodes, grads, *x, d);
        }
        Op::Log(x) => {
            let d = gout.iter().zip(&val(*x).data).map(|(&g, &v)| g / v).collect();
            accumulate(nodes, grads, *x, d);
        }
        Op::Exp(x) => {
            let d = gout.iter().zip(&node.value.data).map(|(&g, &y)| g * y).collect();
            accumulate(nodes, grads, *x, d);
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![T::ZERO; val(*x).data.len()];
            for (&g, &i) in gout.iter().zip(argmax) {
                dx[i] += g;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Conv2d {
            input,
            kernel,
            cols,
            geom,
        } => {
            let (dk, dx) = conv::conv_backward(gout, cols, &val(*kernel).data, geom, tracked(*input));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *input, dx);
            }
            accumulate(nodes, grads, *kernel, dk);
        }
        Op::Gem { x, p, eps } => {
            let xv = val(*x);
            let pd = &val(*p).data;
            let (n, c) = (xv.shape[0], xv.shape[1]);
            let inner = xv.shape[2] * xv.shape[3];
            let cnt = T::from_usize(inner);
            let mut dx = vec![T::ZERO; xv.data.len()];
            let mut dp = vec![T::ZERO; c];
            for s in 0..n {
                for ch in 0..c {
                    let g = gout[s * c + ch];
                    let base = (s * c + ch) * inner;
                    let plane = &xv.data[base..base + inner];
                    let p = pd[ch];
                    let peak = plane.iter().fold(*eps, |a, &v| a.max(v));
                    // r_j = max(x_j,eps)/peak; keep r_j^p and ln r_j from one pass
                    let mut acc = T::ZERO;
                    let mut weighted_log = T::ZERO;
                    let dxs = &mut dx[base..base + inner];
                    for (d, &v) in dxs.iter_mut().zip(plane) {
                        let lr = (v.max(*eps) / peak).ln();
                        let rp = (p * lr).exp();
                        acc += rp;
                        weighted_log += rp * lr;
                        *d = rp;
                    }
                    let q = acc / cnt;
                    let f = peak * q.powf(T::ONE / p);
                    // df/dx_j = f * r_j^(p-1) / (M * q * peak)
                    let kx = g * f / (cnt * q);
                    for (d, &v) in dxs.iter_mut().zip(plane) {
                        *d = if v > *eps { kx * *d / v } else { T::ZERO };
                    }
                    weighted_log = weighted_log / cnt;
                    // d ln f / dp = -ln q / p^2 + mean(r^p ln r) / (p q)
                    let dlog = -q.ln() / (p * p) + weighted_log / (p * q);
                    dp[ch] += g * f * dlog;
                }
            }
            if tracked(*x) {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *p, dp);
        }
        Op::ArcMargin {
            cos,
            labels,
            scale,
            margin,
        } => {
            let cv = val(*cos);
            let cols = cv.shape[1];
            let mut d: Vec<T> = gout.iter().map(|&g| g * *scale).collect();
            let lo = T::from_f64(-1.0 + ACOS_CLAMP);
            let hi = T::from_f64(1.0 - ACOS_CLAMP);
            let labels: &[usize] = if *margin == T::ZERO { &[] } else { labels };
            for (r, &y) in labels.iter().enumerate() {
                let i = r * cols + y;
                let c = cv.data[i];
                d[i] = if c > lo && c < hi {
                    let theta = c.acos();
                    gout[i] * *scale * (theta + *margin).sin() / theta.sin()
                } else {
                    T::ZERO
                };
            }
            accumulate(nodes, grads, *cos, d);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = val(*logits).shape[1];
            let n = labels.len();
            let k = gout[0] / T::from_usize(n);
            let mut d: Vec<T> = probs.iter().map(|&p| p * k).collect();
            for (r, &y) in labels.iter().enumerate() {
                d[r * c + y] -= k;
            }
            accumulate(nodes, grads, *logits, d);
        }
    }
}
