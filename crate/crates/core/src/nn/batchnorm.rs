//! Per-channel batch normalization over `(batch, height, width)`.

use super::params::{ParamSet, ParamVisitor, ParamVisitorMut};
use super::{Real, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the old running value: `r <- momentum * r + (1 - momentum) * batch`.
    pub momentum: f64,
    pub epsilon: f64,
}

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

impl<T: Real> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl<T: Real> ParamSet<T> for BatchNormLayer<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        let c = self.channels();
        f("gamma", &[c], &self.gamma);
        f("beta", &[c], &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        let c = self.channels();
        f("gamma", &[c], &mut self.gamma);
        f("beta", &[c], &mut self.beta);
    }

    fn visit_buffers(&self, f: &mut ParamVisitor<'_, T>) {
        let c = self.channels();
        f("running_mean", &[c], &self.running_mean);
        f("running_var", &[c], &self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        let c = self.channels();
        f("running_mean", &[c], &mut self.running_mean);
        f("running_var", &[c], &mut self.running_var);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: BnMode,
    normalized: Tensor4<T>,
    inv_std: Vec<T>,
}

/// Normalizes `x`; in train mode also folds the batch statistics into the
/// running estimates.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor4<T>,
    layer: &mut BatchNormLayer<T>,
    mode: BnMode,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = x.shape();
    if c != layer.channels() {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input has {c}",
            layer.channels()
        )));
    }
    if mode == BnMode::Train && n * h * w < 2 {
        return Err(Error::shape(
            "batch norm in train mode needs at least 2 values per channel",
        ));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let eps = T::from_f64_lossy(layer.epsilon);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        BnMode::Train => {
            for ch in 0..c {
                let mut s = T::zero();
                for s_idx in 0..n {
                    s += x.sample(s_idx)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / T::from_f64_lossy(count);
                let mut v = T::zero();
                for s_idx in 0..n {
                    for &val in &x.sample(s_idx)[ch * hw..(ch + 1) * hw] {
                        v += (val - m) * (val - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / T::from_f64_lossy(count);
            }
            let mom = T::from_f64_lossy(layer.momentum);
            let unbias = T::from_f64_lossy(count / (count - 1.0).max(1.0));
            for ch in 0..c {
                layer.running_mean[ch] = mom * layer.running_mean[ch] + (T::one() - mom) * mean[ch];
                layer.running_var[ch] = mom * layer.running_var[ch] + (T::one() - mom) * var[ch] * unbias;
            }
        }
        BnMode::Eval => {
            mean.copy_from_slice(&layer.running_mean);
            var.copy_from_slice(&layer.running_var);
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let ns = normalized.sample_mut(s);
        for ch in 0..c {
            for k in ch * hw..(ch + 1) * hw {
                ns[k] = (xs[k] - mean[ch]) * inv_std[ch];
            }
        }
        let ns = normalized.sample(s).to_vec();
        let ys = y.sample_mut(s);
        for ch in 0..c {
            for k in ch * hw..(ch + 1) * hw {
                ys[k] = layer.gamma[ch] * ns[k] + layer.beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    grad: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    layer: &BatchNormLayer<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    grad.expect_shape(cache.normalized.shape(), "batch norm backward")?;
    let [n, c, h, w] = grad.shape();
    let hw = h * w;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        let g = grad.sample(s);
        let xh = cache.normalized.sample(s);
        for ch in 0..c {
            for k in ch * hw..(ch + 1) * hw {
                dgamma[ch] += g[k] * xh[k];
                dbeta[ch] += g[k];
            }
        }
    }
    let mut dx = Tensor4::zeros(grad.shape());
    let count = T::from_f64_lossy((n * hw) as f64);
    for s in 0..n {
        let g = grad.sample(s);
        let xh = cache.normalized.sample(s);
        let out = dx.sample_mut(s);
        for ch in 0..c {
            let scale = layer.gamma[ch] * cache.inv_std[ch];
            for k in ch * hw..(ch + 1) * hw {
                out[k] = match cache.mode {
                    // batch statistics depend on every input of the channel
                    BnMode::Train => scale * (g[k] - dbeta[ch] / count - xh[k] * dgamma[ch] / count),
                    BnMode::Eval => scale * g[k],
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
