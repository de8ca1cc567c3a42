//! Central finite-difference checks of every analytic gradient.
//!
//! Sign-like layers are checked through their smooth surrogates: RSign as
//! `approx_sign(x - alpha0) - (alpha - alpha0)` and weight binarization as
//! `scale(w) * sign(w0) + scale(w0) * (clip(w) - clip(w0))`, both anchored at
//! the evaluation point. Inputs are sampled away from every kink.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::{
    approx_sign, rprelu_backward, rprelu_forward, rsign_backward, weight_binarize_backward, RPReLUParams,
    RSignParams,
};
use crate::arch::{build_network_for, Network, ParamKind, Scale, Variant};
use crate::bitkernel::compute_scale;
use crate::error::Result;
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, fc_backward, fc_forward, softmax,
    BatchNormParams, Linear,
};
use crate::loss::{distributional_loss, distributional_loss_backward};
use crate::tensor::FloatTensor;

/// Bound on the relative error of a single layer.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Bound on the relative error of the whole network through its surrogates.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

const LAYER_STEP: f64 = 1e-5;
const LAYER_FLOOR: f64 = 1e-8;
const COMPOSITE_STEP: f64 = 1e-5;
const COMPOSITE_FLOOR: f64 = 1e-6;
/// Minimum distance of a sampled point from a kink.
const KINK_MARGIN: f64 = 0.05;

/// Signature of [`rsign_backward`], replaceable to test that the suite
/// catches a wrong threshold gradient.
pub type RSignBackward = fn(&FloatTensor, &RSignParams, &FloatTensor) -> Result<(FloatTensor, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub kind: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub samples: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn row(&self, kind: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(
                s,
                "{:<22} max_rel_err={:.3e} tol={:.0e} samples={:<5} {}",
                r.kind,
                r.max_rel_err,
                r.tolerance,
                r.samples,
                if r.passed() { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        s
    }
}

fn rel_err(fd: f64, analytic: f64, floor: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(floor)
}

/// Accumulates the worst relative error of one kind.
struct Tracker {
    kind: &'static str,
    worst: f64,
    samples: usize,
    floor: f64,
    tolerance: f64,
}

impl Tracker {
    fn layer(kind: &'static str) -> Self {
        Self {
            kind,
            worst: 0.0,
            samples: 0,
            floor: LAYER_FLOOR,
            tolerance: LAYER_TOLERANCE,
        }
    }

    fn record(&mut self, fd: f64, analytic: f64) {
        let e = rel_err(fd, analytic, self.floor);
        // NaN must count as a failure
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
        self.samples += 1;
    }

    fn row(self) -> CheckRow {
        CheckRow {
            kind: self.kind,
            max_rel_err: self.worst,
            tolerance: self.tolerance,
            samples: self.samples,
        }
    }
}

/// Central difference of `f` in coordinate `j` of `v`.
fn central(v: &mut [f64], j: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = v[j];
    v[j] = orig + h;
    let plus = f(v);
    v[j] = orig - h;
    let minus = f(v);
    v[j] = orig;
    (plus - minus) / (2.0 * h)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> FloatTensor {
    FloatTensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// A value in `lo..hi` at least [`KINK_MARGIN`] from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64]) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > KINK_MARGIN) {
            return v;
        }
    }
}

fn check_rsign(rng: &mut ChaCha8Rng, backward: RSignBackward, rows: &mut Vec<CheckRow>) -> Result<()> {
    let (n, c, h, w) = (2, 3, 3, 3);
    let p = RSignParams {
        alpha: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let plane = h * w;
    let x = FloatTensor::from_fn(&[n, c, h, w], |i| {
        let a = p.alpha[(i / plane) % c];
        a + away_from(rng, -1.5, 1.5, &[-1.0, 0.0, 1.0])
    });
    let up = uniform(rng, x.shape(), -1.0, 1.0);
    let (gx, ga) = backward(&x, &p, &up)?;
    let alpha0 = p.alpha.clone();
    let surrogate = |xs: &[f64], alpha: &[f64]| -> f64 {
        xs.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                up.data()[i] * (approx_sign(v - alpha0[ch]) - (alpha[ch] - alpha0[ch]))
            })
            .sum()
    };
    let mut t = Tracker::layer("rsign.alpha");
    let mut alpha = p.alpha.clone();
    for ch in 0..c {
        let fd = central(&mut alpha, ch, LAYER_STEP, |a| surrogate(x.data(), a));
        t.record(fd, ga[ch]);
    }
    rows.push(t.row());
    let mut t = Tracker::layer("rsign.input");
    let mut xs = x.data().to_vec();
    for j in 0..xs.len() {
        let fd = central(&mut xs, j, LAYER_STEP, |v| surrogate(v, &p.alpha));
        t.record(fd, gx.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

fn check_rprelu(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let (n, c, h, w) = (2, 3, 3, 3);
    let p = RPReLUParams {
        beta: (0..c).map(|_| rng.gen_range(0.05..0.5)).collect(),
        gamma: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        zeta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let plane = h * w;
    let x = FloatTensor::from_fn(&[n, c, h, w], |i| away_from(rng, -2.0, 2.0, &[p.gamma[(i / plane) % c]]));
    let up = uniform(rng, x.shape(), -1.0, 1.0);
    let g = rprelu_backward(&x, &p, &up)?;
    let loss = |x: &FloatTensor, p: &RPReLUParams| -> f64 { dot(rprelu_forward(x, p).expect("shapes fixed").data(), up.data()) };
    let coefficient = |field: fn(&mut RPReLUParams) -> &mut Vec<f64>, grads: &[f64], kind: &'static str| {
        let mut t = Tracker::layer(kind);
        let mut vals = field(&mut p.clone()).clone();
        for ch in 0..c {
            let fd = central(&mut vals, ch, LAYER_STEP, |v| {
                let mut r = p.clone();
                field(&mut r).copy_from_slice(v);
                loss(&x, &r)
            });
            t.record(fd, grads[ch]);
        }
        t.row()
    };
    rows.push(coefficient(|p| &mut p.beta, &g.beta, "rprelu.beta"));
    rows.push(coefficient(|p| &mut p.gamma, &g.gamma, "rprelu.gamma"));
    rows.push(coefficient(|p| &mut p.zeta, &g.zeta, "rprelu.zeta"));
    let mut t = Tracker::layer("rprelu.input");
    let mut xs = x.data().to_vec();
    for j in 0..xs.len() {
        let fd = central(&mut xs, j, LAYER_STEP, |v| {
            loss(&FloatTensor::new(x.shape().to_vec(), v.to_vec()).expect("same shape"), &p)
        });
        t.record(fd, g.grad_x.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

fn check_batchnorm(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let c = 3;
    let mut p = BatchNormParams::new(c);
    p.gamma = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    p.beta = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let x = uniform(rng, &[3, c, 2, 2], -2.0, 2.0);
    // a nonlinear loss, since a linear one has zero gradient through BN's mean
    let up = uniform(rng, x.shape(), -1.0, 1.0);
    let loss = |x: &FloatTensor, p: &BatchNormParams| -> f64 {
        let (y, _) = batchnorm_forward(x, &mut p.clone(), true).expect("shapes fixed");
        y.data().iter().zip(up.data()).map(|(v, u)| u * v + 0.5 * v * v * v).sum()
    };
    let (y, cache) = batchnorm_forward(&x, &mut p.clone(), true)?;
    let dy = FloatTensor::from_fn(x.shape(), |i| up.data()[i] + 1.5 * y.data()[i] * y.data()[i]);
    let g = batchnorm_backward(&cache, &p, &dy)?;
    for (kind, grads, is_gamma) in [("bn.gamma", &g.gamma, true), ("bn.beta", &g.beta, false)] {
        let mut t = Tracker::layer(kind);
        for ch in 0..c {
            let mut vals = if is_gamma { p.gamma.clone() } else { p.beta.clone() };
            let fd = central(&mut vals, ch, LAYER_STEP, |v| {
                let mut q = p.clone();
                if is_gamma {
                    q.gamma.copy_from_slice(v);
                } else {
                    q.beta.copy_from_slice(v);
                }
                loss(&x, &q)
            });
            t.record(fd, grads[ch]);
        }
        rows.push(t.row());
    }
    let mut t = Tracker::layer("bn.input");
    let mut xs = x.data().to_vec();
    for j in 0..xs.len() {
        let fd = central(&mut xs, j, LAYER_STEP, |v| {
            loss(&FloatTensor::new(x.shape().to_vec(), v.to_vec()).expect("same shape"), &p)
        });
        t.record(fd, g.grad_x.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

fn check_fc(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let (n, fin, fout) = (3, 5, 4);
    let layer = Linear::new(uniform(rng, &[fout, fin], -1.0, 1.0), (0..fout).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let x = uniform(rng, &[n, fin], -1.0, 1.0);
    let up = uniform(rng, &[n, fout], -1.0, 1.0);
    let g = fc_backward(&x, &layer, &up)?;
    let loss = |x: &FloatTensor, l: &Linear| dot(fc_forward(x, l).expect("shapes fixed").data(), up.data());
    let mut t = Tracker::layer("fc.weight");
    let mut ws = layer.weight.data().to_vec();
    for j in 0..ws.len() {
        let fd = central(&mut ws, j, LAYER_STEP, |v| {
            let l = Linear::new(FloatTensor::new(vec![fout, fin], v.to_vec()).expect("same shape"), layer.bias.clone())
                .expect("bias sized");
            loss(&x, &l)
        });
        t.record(fd, g.weight.data()[j]);
    }
    rows.push(t.row());
    let mut t = Tracker::layer("fc.bias");
    let mut bs = layer.bias.clone();
    for j in 0..fout {
        let fd = central(&mut bs, j, LAYER_STEP, |v| {
            loss(&x, &Linear::new(layer.weight.clone(), v.to_vec()).expect("bias sized"))
        });
        t.record(fd, g.bias[j]);
    }
    rows.push(t.row());
    let mut t = Tracker::layer("fc.input");
    let mut xs = x.data().to_vec();
    for j in 0..xs.len() {
        let fd = central(&mut xs, j, LAYER_STEP, |v| {
            loss(&FloatTensor::new(vec![n, fin], v.to_vec()).expect("same shape"), &layer)
        });
        t.record(fd, g.grad_x.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

fn check_conv(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let (stride, padding, groups, pad_value) = (2, 1, 2, -1.0);
    let x = uniform(rng, &[2, 4, 5, 5], -1.0, 1.0);
    let w = uniform(rng, &[4, 2, 3, 3], -1.0, 1.0);
    let y = conv2d(&x, &w, stride, padding, groups, pad_value, None)?;
    let up = uniform(rng, y.shape(), -1.0, 1.0);
    let (gx, gw) = conv2d_backward(&x, &w, &up, stride, padding, groups, pad_value, true)?;
    let gx = gx.expect("input gradient requested");
    let loss = |x: &FloatTensor, w: &FloatTensor| {
        dot(conv2d(x, w, stride, padding, groups, pad_value, None).expect("shapes fixed").data(), up.data())
    };
    let mut t = Tracker::layer("conv.weight");
    let mut ws = w.data().to_vec();
    for j in 0..ws.len() {
        let fd = central(&mut ws, j, LAYER_STEP, |v| {
            loss(&x, &FloatTensor::new(w.shape().to_vec(), v.to_vec()).expect("same shape"))
        });
        t.record(fd, gw.data()[j]);
    }
    rows.push(t.row());
    let mut t = Tracker::layer("conv.input");
    let mut xs = x.data().to_vec();
    for j in 0..xs.len() {
        let fd = central(&mut xs, j, LAYER_STEP, |v| {
            loss(&FloatTensor::new(x.shape().to_vec(), v.to_vec()).expect("same shape"), &w)
        });
        t.record(fd, gx.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

fn check_latent_weights(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let shape = [3, 2, 2, 2];
    let w = FloatTensor::from_fn(&shape, |_| away_from(rng, -1.3, 1.3, &[-1.0, 0.0, 1.0]));
    let up = uniform(rng, &shape, -1.0, 1.0);
    let g = weight_binarize_backward(&w, &up)?;
    let n = w.len() / shape[0];
    let scale0 = compute_scale(&w)?;
    let sign = |v: f64| if v > 0.0 { 1.0 } else { -1.0 };
    let clip = |v: f64| v.clamp(-1.0, 1.0);
    let w0 = w.data().to_vec();
    let surrogate = |ws: &[f64]| -> f64 {
        ws.chunks(n)
            .enumerate()
            .map(|(o, filt)| {
                let scale = filt.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
                filt.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let k = o * n + j;
                        up.data()[k] * (scale * sign(w0[k]) + scale0[o] * (clip(v) - clip(w0[k])))
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let mut t = Tracker::layer("latent.weight");
    let mut ws = w0.clone();
    for j in 0..ws.len() {
        let fd = central(&mut ws, j, LAYER_STEP, surrogate);
        t.record(fd, g.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

fn check_distributional_loss(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let logits = uniform(rng, &[4, 5], -3.0, 3.0);
    let teacher = softmax(&uniform(rng, &[4, 5], -3.0, 3.0))?;
    let g = distributional_loss_backward(&logits, &teacher)?;
    let mut t = Tracker::layer("loss.distributional");
    let mut ls = logits.data().to_vec();
    for j in 0..ls.len() {
        let fd = central(&mut ls, j, LAYER_STEP, |v| {
            distributional_loss(&FloatTensor::new(vec![4, 5], v.to_vec()).expect("same shape"), &teacher)
                .expect("valid teacher")
        });
        t.record(fd, g.data()[j]);
    }
    rows.push(t.row());
    Ok(())
}

/// Every trainable tensor of a small binary network with 1-bit weights,
/// differenced through the anchored surrogate.
fn check_network(rng: &mut ChaCha8Rng, rows: &mut Vec<CheckRow>) -> Result<()> {
    let spec = build_network_for(Variant::reactnet_a(), Scale::Desk, [2, 8, 8], 3);
    let mut net = Network::new(&spec, rng)?;
    net.set_binary_weights(true);
    let x = uniform(rng, &[3, 2, 8, 8], -1.0, 1.0);
    let teacher = softmax(&uniform(rng, &[3, 3], -1.0, 1.0))?;
    net.set_anchor(&x)?;
    let (logits, tape) = net.forward_train(&x)?;
    let up = distributional_loss_backward(&logits, &teacher)?;
    let grads = net.backward(&tape, &up)?.entries();
    let loss = |net: &mut Network| -> Result<f64> {
        let (l, _) = net.forward_train(&x)?;
        distributional_loss(&l, &teacher)
    };
    let mut t = Tracker {
        kind: "network.composite",
        worst: 0.0,
        samples: 0,
        floor: COMPOSITE_FLOOR,
        tolerance: COMPOSITE_TOLERANCE,
    };
    let current = net.clone().params_mut().into_iter().map(|p| p.values.to_vec()).collect::<Vec<_>>();
    for (pi, (_, kind, g)) in grads.iter().enumerate() {
        for j in (0..g.len()).step_by(g.len().div_ceil(2).max(1)) {
            let w = current[pi][j].abs();
            // |w| and clip(w) have kinks at 0 and 1
            if *kind == ParamKind::LatentWeight && (w < KINK_MARGIN || (w - 1.0).abs() < KINK_MARGIN) {
                continue;
            }
            let mut plus = net.clone();
            plus.params_mut()[pi].values[j] += COMPOSITE_STEP;
            let mut minus = net.clone();
            minus.params_mut()[pi].values[j] -= COMPOSITE_STEP;
            let fd = (loss(&mut plus)? - loss(&mut minus)?) / (2.0 * COMPOSITE_STEP);
            t.record(fd, g[j]);
        }
    }
    rows.push(t.row());
    Ok(())
}

/// Runs the full suite with the library's own RSign backward.
pub fn run_grad_check(seed: u64) -> Result<GradCheckReport> {
    run_grad_check_with(seed, rsign_backward)
}

pub fn run_grad_check_with(seed: u64, rsign: RSignBackward) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    check_rsign(&mut rng, rsign, &mut rows)?;
    check_rprelu(&mut rng, &mut rows)?;
    check_batchnorm(&mut rng, &mut rows)?;
    check_fc(&mut rng, &mut rows)?;
    check_conv(&mut rng, &mut rows)?;
    check_latent_weights(&mut rng, &mut rows)?;
    check_distributional_loss(&mut rng, &mut rows)?;
    check_network(&mut rng, &mut rows)?;
    Ok(GradCheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_alpha(x: &FloatTensor, p: &RSignParams, up: &FloatTensor) -> Result<(FloatTensor, Vec<f64>)> {
        let (gx, ga) = rsign_backward(x, p, up)?;
        Ok((gx, ga.into_iter().map(|g| -g).collect()))
    }

    #[test]
    fn suite_passes_and_covers_every_kind() {
        let report = run_grad_check(3).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        for kind in [
            "rsign.alpha",
            "rprelu.beta",
            "rprelu.gamma",
            "rprelu.zeta",
            "bn.gamma",
            "bn.beta",
            "fc.weight",
            "fc.bias",
            "latent.weight",
            "loss.distributional",
            "network.composite",
        ] {
            assert!(report.row(kind).is_some_and(|r| r.samples > 0), "missing {kind}");
        }
    }

    #[test]
    fn wrong_threshold_gradient_is_caught() {
        let report = run_grad_check_with(3, flipped_alpha).unwrap();
        assert!(!report.passed());
        assert!(!report.row("rsign.alpha").unwrap().passed());
        assert!(report.row("rprelu.beta").unwrap().passed());
    }

    #[test]
    fn report_text_has_one_line_per_kind() {
        let report = run_grad_check(5).unwrap();
        assert_eq!(report.to_text().lines().count(), report.rows.len());
    }
}
