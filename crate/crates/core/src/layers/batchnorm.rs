use crate::activations::channel_layout;
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Saved forward state for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: FloatTensor,
    inv_std: Vec<f64>,
    training: bool,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel normalization. Training mode normalizes with batch statistics
/// and folds them into the running estimates (unbiased variance); eval mode
/// uses the running estimates.
pub fn batchnorm_forward(
    x: &FloatTensor,
    p: &mut BatchNormParams,
    training: bool,
) -> Result<(FloatTensor, BatchNormCache)> {
    let (n, c, plane) = channel_layout(x)?;
    if c != p.channels() {
        return Err(Error::ChannelMismatch {
            expected: p.channels(),
            found: c,
        });
    }
    if training && n < 2 {
        return Err(Error::InvalidArgument(
            "batch norm in training mode needs a batch of at least 2".into(),
        ));
    }
    let count = (n * plane) as f64;
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for img in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let s = &x.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
                *m += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for img in 0..n {
            for (ch, v) in var.iter_mut().enumerate() {
                let s = &x.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane];
                *v += s.iter().map(|x| (x - mean[ch]) * (x - mean[ch])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            p.running_mean[ch] = (1.0 - p.momentum) * p.running_mean[ch] + p.momentum * mean[ch];
            p.running_var[ch] = (1.0 - p.momentum) * p.running_var[ch] + p.momentum * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    for (j, (hs, os)) in xhat.data_mut().chunks_mut(plane).zip(out.data_mut().chunks_mut(plane)).enumerate() {
        let ch = j % c;
        let (m, is, g, b) = (mean[ch], inv_std[ch], p.gamma[ch], p.beta[ch]);
        for (h, o) in hs.iter_mut().zip(os) {
            *h = (*h - m) * is;
            *o = g * *h + b;
        }
    }
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            training,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub grad_x: FloatTensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    p: &BatchNormParams,
    upstream: &FloatTensor,
) -> Result<BatchNormGrads> {
    upstream.ensure_shape(cache.xhat.shape())?;
    let (n, c, plane) = channel_layout(upstream)?;
    let mut gamma = vec![0.0; c];
    let mut beta = vec![0.0; c];
    for (j, (gs, hs)) in upstream.data().chunks(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = j % c;
        beta[ch] += gs.iter().sum::<f64>();
        gamma[ch] += gs.iter().zip(hs).map(|(g, h)| g * h).sum::<f64>();
    }
    let count = (n * plane) as f64;
    let mut grad_x = upstream.clone();
    for (j, (gs, hs)) in grad_x.data_mut().chunks_mut(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = j % c;
        let scale = p.gamma[ch] * cache.inv_std[ch];
        let (mb, mg) = (beta[ch] / count, gamma[ch] / count);
        for (g, &h) in gs.iter_mut().zip(hs) {
            *g = if cache.training { scale * (*g - mb - h * mg) } else { scale * *g };
        }
    }
    Ok(BatchNormGrads { grad_x, gamma, beta })
}
