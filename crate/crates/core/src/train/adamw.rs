use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self {
            config: AdamWConfig::default(),
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update of every `(name, param)` with the matching gradient.
    ///
    /// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ` with bias-corrected moments.
    /// Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (((name, p), g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "`{name}`: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = (1.0 - beta1.powi(t)) as f32;
        let bc2 = (1.0 - beta2.powi(t)) as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
        let (lr, decay) = (lr as f32, (lr * weight_decay) as f32);
        for (((_, p), g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gr), (mi, vi)) in it {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps) - decay * *w;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(values: Vec<f32>) -> (Tensor, AdamW) {
        let t = Tensor::from_vec(values);
        let opt = AdamW::new([t.shape()]);
        (t, opt)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut p, mut opt) = one(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let g = Tensor::zeros([3]);
        opt.step(vec![("w".into(), &mut p)], &[g], 1e-3, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut p, mut opt) = one(vec![0.5, 0.5, 0.5]);
        let g = Tensor::from_vec(vec![3.0, -0.01, 200.0]);
        opt.step(vec![("w".into(), &mut p)], &[g], 1e-3, 0.0).unwrap();
        for (v, s) in p.data().iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((v - (0.5 + 1e-3 * s)).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn pure_decay() {
        let (mut p, mut opt) = one(vec![2.0]);
        opt.step(vec![("w".into(), &mut p)], &[Tensor::zeros([1])], 1e-3, 5e-4).unwrap();
        assert_eq!(p.data()[0], 2.0 - 2.0 * (1e-3f64 * 5e-4) as f32);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut p, mut opt) = one(vec![1.0, 1.0]);
        let before = p.clone();
        let g = Tensor::from_vec(vec![0.0, f32::NAN]);
        let err = opt.step(vec![("neck.fc.bias".into(), &mut p)], &[g], 1e-3, 0.0).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "neck.fc.bias"));
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }
}
