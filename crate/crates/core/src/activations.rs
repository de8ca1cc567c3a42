//! Sign / RSign binarization and PReLU / RPReLU activations with their
//! backward passes.
//!
//! RSign thresholds each channel at a learnable `alpha`; RPReLU shifts the
//! input by `-gamma`, scales the non-positive side by `beta` and shifts the
//! output by `zeta`. At `alpha = gamma = zeta = 0` they reduce to Sign and
//! PReLU.

use crate::bitkernel::compute_scale;
use crate::error::{Error, Result};
use crate::tensor::{pack, BitTensor, FloatTensor};

pub const DEFAULT_SLOPE: f64 = 0.25;

/// `(batch, channels, plane)` for rank-2 `(N, C)` or rank-4 `(N, C, H, W)`.
pub(crate) fn channel_layout(x: &FloatTensor) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::InvalidShape(format!(
            "expected (N, C) or (N, C, H, W), got {:?}",
            x.shape()
        ))),
    }
}

fn check_channels(x: &FloatTensor, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, plane) = channel_layout(x)?;
    if c != channels {
        return Err(Error::ChannelMismatch {
            expected: channels,
            found: c,
        });
    }
    Ok((n, c, plane))
}

/// Bi-Real piecewise-polynomial approximation of sign.
#[inline]
pub fn approx_sign(u: f64) -> f64 {
    if u < -1.0 {
        -1.0
    } else if u < 0.0 {
        2.0 * u + u * u
    } else if u < 1.0 {
        2.0 * u - u * u
    } else {
        1.0
    }
}

/// Derivative of [`approx_sign`], used as the straight-through slope of sign.
#[inline]
pub fn approx_sign_grad(u: f64) -> f64 {
    if (-1.0..0.0).contains(&u) {
        2.0 + 2.0 * u
    } else if (0.0..1.0).contains(&u) {
        2.0 - 2.0 * u
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RSignParams {
    pub alpha: Vec<f64>,
}

impl RSignParams {
    /// Zero thresholds: plain Sign.
    pub fn new(channels: usize) -> Self {
        Self {
            alpha: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }
}

/// ±1 float tensor: +1 where `x > alpha[c]`, -1 otherwise.
pub(crate) fn rsign_values(x: &FloatTensor, p: &RSignParams) -> Result<FloatTensor> {
    let (_, c, plane) = check_channels(x, p.channels())?;
    let mut out = x.clone();
    for (j, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = p.alpha[j % c];
        chunk.iter_mut().for_each(|v| *v = if *v > a { 1.0 } else { -1.0 });
    }
    Ok(out)
}

pub fn rsign_forward(x: &FloatTensor, p: &RSignParams) -> Result<BitTensor> {
    pack(&rsign_values(x, p)?)
}

pub fn sign_forward(x: &FloatTensor) -> Result<BitTensor> {
    let (_, c, _) = channel_layout(x)?;
    rsign_forward(x, &RSignParams::new(c))
}

/// Returns `(grad_x, grad_alpha)`. `grad_alpha[c]` is the channel sum of
/// `-upstream`; `grad_x` uses the [`approx_sign_grad`] slope at `x - alpha`.
pub fn rsign_backward(
    x: &FloatTensor,
    p: &RSignParams,
    upstream: &FloatTensor,
) -> Result<(FloatTensor, Vec<f64>)> {
    let (_, c, plane) = check_channels(x, p.channels())?;
    upstream.ensure_shape(x.shape())?;
    let mut grad_x = upstream.clone();
    let mut grad_alpha = vec![0.0; c];
    for (j, (gs, xs)) in grad_x.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = j % c;
        let a = p.alpha[ch];
        let mut sum = 0.0;
        for (g, &xv) in gs.iter_mut().zip(xs) {
            sum += *g;
            *g *= approx_sign_grad(xv - a);
        }
        grad_alpha[ch] -= sum;
    }
    Ok((grad_x, grad_alpha))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RPReLUParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl RPReLUParams {
    /// `beta = 0.25`, zero shifts: PReLU with slope 0.25.
    pub fn new(channels: usize) -> Self {
        Self {
            beta: vec![DEFAULT_SLOPE; channels],
            gamma: vec![0.0; channels],
            zeta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }
}

#[inline]
fn rprelu_scalar(x: f64, beta: f64, gamma: f64, zeta: f64) -> f64 {
    if x > gamma {
        x - gamma + zeta
    } else {
        beta * (x - gamma) + zeta
    }
}

pub fn rprelu_forward(x: &FloatTensor, p: &RPReLUParams) -> Result<FloatTensor> {
    let (_, c, plane) = check_channels(x, p.channels())?;
    let mut out = x.clone();
    for (j, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = j % c;
        let (b, g, z) = (p.beta[ch], p.gamma[ch], p.zeta[ch]);
        chunk.iter_mut().for_each(|v| *v = rprelu_scalar(*v, b, g, z));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RPReLUGrads {
    pub grad_x: FloatTensor,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub zeta: Vec<f64>,
}

pub fn rprelu_backward(
    x: &FloatTensor,
    p: &RPReLUParams,
    upstream: &FloatTensor,
) -> Result<RPReLUGrads> {
    let (_, c, plane) = check_channels(x, p.channels())?;
    upstream.ensure_shape(x.shape())?;
    let mut grad_x = upstream.clone();
    let (mut beta, mut gamma, mut zeta) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for (j, (gs, xs)) in grad_x.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = j % c;
        let (pb, pg) = (p.beta[ch], p.gamma[ch]);
        let (mut db, mut dg, mut dz) = (0.0, 0.0, 0.0);
        for (g, &xv) in gs.iter_mut().zip(xs) {
            let up = *g;
            dz += up;
            if xv > pg {
                dg -= up;
            } else {
                db += up * (xv - pg);
                dg -= up * pb;
                *g = up * pb;
            }
        }
        beta[ch] += db;
        gamma[ch] += dg;
        zeta[ch] += dz;
    }
    Ok(RPReLUGrads {
        grad_x,
        beta,
        gamma,
        zeta,
    })
}

/// `sign(w)` as a ±1 tensor (zero maps to -1) together with the per-filter
/// scale.
pub fn weight_binarize_forward(w: &FloatTensor) -> Result<(FloatTensor, Vec<f64>)> {
    let scale = compute_scale(w)?;
    Ok((w.map(|v| if v > 0.0 { 1.0 } else { -1.0 }), scale))
}

/// Gradient w.r.t. latent weights of `w_b = scale(w) * sign(w)`.
///
/// Sign uses the clipped straight-through rule (passes where `|w| <= 1`);
/// the scale is differentiated exactly: `d scale / d w_j = sign(w_j) / n`.
pub fn weight_binarize_backward(w: &FloatTensor, upstream: &FloatTensor) -> Result<FloatTensor> {
    upstream.ensure_shape(w.shape())?;
    let scale = compute_scale(w)?;
    let n = w.len() / scale.len();
    let mut grad = FloatTensor::zeros(w.shape());
    for (o, s) in scale.iter().enumerate() {
        let ws = &w.data()[o * n..(o + 1) * n];
        let gs = &upstream.data()[o * n..(o + 1) * n];
        let sign = |v: f64| if v > 0.0 { 1.0 } else { -1.0 };
        let proj: f64 = ws.iter().zip(gs).map(|(&wv, &g)| g * sign(wv)).sum::<f64>() / n as f64;
        for (j, out) in grad.data_mut()[o * n..(o + 1) * n].iter_mut().enumerate() {
            let ste = if ws[j].abs() <= 1.0 { s * gs[j] } else { 0.0 };
            *out = ste + sign(ws[j]) * proj;
        }
    }
    Ok(grad)
}

/// Straight-through slope alone, without the scale term.
pub fn clip_ste(w: f64) -> f64 {
    if w.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}
