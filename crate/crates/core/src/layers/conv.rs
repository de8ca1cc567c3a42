//! Dense (optionally grouped) convolution through im2col + GEMM.
//!
//! `pad_value` is the value read outside the feature map: 0 for real-valued
//! inputs, -1 when the input is a binarized activation.

use crate::bitkernel::conv_out_size;
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::opscount::OpTally;
use crate::par;
use crate::tensor::FloatTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

struct Plan {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    groups: usize,
}

impl Plan {
    fn new(x: &FloatTensor, w: &FloatTensor, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, cg, kh, kw) = w.dims4()?;
        if kh != kw {
            return Err(Error::InvalidShape(format!("non-square kernel {kh}x{kw}")));
        }
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {groups} must divide channels {c} -> {o}"
            )));
        }
        if cg != c / groups {
            return Err(Error::ChannelMismatch {
                expected: cg * groups,
                found: c,
            });
        }
        let oh = conv_out_size(h, kh, stride, padding)?;
        let ow = conv_out_size(wd, kw, stride, padding)?;
        if n == 0 || oh == 0 || ow == 0 {
            return Err(Error::InvalidShape("zero-size convolution output".into()));
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            k: kh,
            oh,
            ow,
            groups,
        })
    }

    fn is_pointwise(&self, stride: usize, padding: usize) -> bool {
        self.k == 1 && stride == 1 && padding == 0
    }

    /// rows per group in the column matrix
    fn group_rows(&self) -> usize {
        self.c / self.groups * self.k * self.k
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - padding`
/// falls inside `0..w`.
fn valid_range(kx: usize, stride: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
    let hi = if w + padding > kx { (w + padding - kx).div_ceil(stride).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Column matrix of one image: `(c * k * k) x (oh * ow)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_f64(
    img: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    pad_value: f64,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, stride, padding, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= h {
                        line.fill(pad_value);
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    line[..lo].fill(pad_value);
                    line[hi..].fill(pad_value);
                    if lo < hi {
                        let first = lo * stride + kx - padding;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, ix) in line[lo..hi].iter_mut().zip((first..).step_by(stride)) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    img: &mut [f64],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, stride, padding, w, ow);
                if lo >= hi {
                    continue;
                }
                let first = lo * stride + kx - padding;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst = &mut img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    for (v, ix) in line.iter().zip((first..).step_by(stride)) {
                        dst[ix] += v;
                    }
                }
            }
        }
    }
}

/// Zero-padded convolution.
pub fn real_conv2d(
    x: &FloatTensor,
    w: &FloatTensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<FloatTensor> {
    conv2d(x, w, stride, padding, groups, 0.0, None)
}

/// Convolution with an explicit padding value.
pub fn conv2d(
    x: &FloatTensor,
    w: &FloatTensor,
    stride: usize,
    padding: usize,
    groups: usize,
    pad_value: f64,
    tally: Option<&OpTally>,
) -> Result<FloatTensor> {
    let p = Plan::new(x, w, stride, padding, groups)?;
    let plane = p.oh * p.ow;
    let in_img = p.c * p.h * p.w;
    let og = p.o / p.groups;
    let kg = p.group_rows();
    let pointwise = p.is_pointwise(stride, padding);
    let mut out = FloatTensor::zeros(&[p.n, p.o, p.oh, p.ow]);
    let xd = x.data();
    let wd = w.data();
    par::for_each_chunk_mut(out.data_mut(), p.o * plane, |img, dst| {
        let src = &xd[img * in_img..(img + 1) * in_img];
        let run = |cols: &[f64], dst: &mut [f64]| {
            for g in 0..p.groups {
                gemm(
                    og,
                    plane,
                    kg,
                    &wd[g * og * kg..(g + 1) * og * kg],
                    false,
                    &cols[g * kg * plane..(g + 1) * kg * plane],
                    false,
                    &mut dst[g * og * plane..(g + 1) * og * plane],
                    0.0,
                );
            }
        };
        if pointwise {
            run(src, dst);
        } else {
            par::with_scratch(p.c * p.k * p.k * plane, |cols| {
                im2col_f64(src, (p.c, p.h, p.w), p.k, stride, padding, pad_value, (p.oh, p.ow), cols);
                run(cols, dst);
            });
        }
    });
    if let Some(t) = tally {
        t.add_real((p.n * p.o * plane * kg) as u64);
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(grad_input, grad_weight)`. The input gradient
/// is skipped when `need_input` is false.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &FloatTensor,
    w: &FloatTensor,
    upstream: &FloatTensor,
    stride: usize,
    padding: usize,
    groups: usize,
    pad_value: f64,
    need_input: bool,
) -> Result<(Option<FloatTensor>, FloatTensor)> {
    let p = Plan::new(x, w, stride, padding, groups)?;
    upstream.ensure_shape(&[p.n, p.o, p.oh, p.ow])?;
    let plane = p.oh * p.ow;
    let in_img = p.c * p.h * p.w;
    let og = p.o / p.groups;
    let kg = p.group_rows();
    let pointwise = p.is_pointwise(stride, padding);
    let xd = x.data();
    let wd = w.data();
    let ud = upstream.data();
    let mut grad_x = FloatTensor::zeros(x.shape());
    let per_image = par::map_chunks_mut(grad_x.data_mut(), in_img, |img, dx| {
        let src = &xd[img * in_img..(img + 1) * in_img];
        let dy = &ud[img * p.o * plane..(img + 1) * p.o * plane];
        let mut dw = vec![0.0; wd.len()];
        let weight_grad = |cols: &[f64], dw: &mut [f64]| {
            for g in 0..p.groups {
                gemm(
                    og,
                    kg,
                    plane,
                    &dy[g * og * plane..(g + 1) * og * plane],
                    false,
                    &cols[g * kg * plane..(g + 1) * kg * plane],
                    true,
                    &mut dw[g * og * kg..(g + 1) * og * kg],
                    0.0,
                );
            }
        };
        let input_grad = |dcols: &mut [f64]| {
            for g in 0..p.groups {
                gemm(
                    kg,
                    plane,
                    og,
                    &wd[g * og * kg..(g + 1) * og * kg],
                    true,
                    &dy[g * og * plane..(g + 1) * og * plane],
                    false,
                    &mut dcols[g * kg * plane..(g + 1) * kg * plane],
                    0.0,
                );
            }
        };
        if pointwise {
            weight_grad(src, &mut dw);
            if need_input {
                input_grad(dx);
            }
        } else {
            let len = p.c * p.k * p.k * plane;
            par::with_scratch(len, |cols| {
                im2col_f64(src, (p.c, p.h, p.w), p.k, stride, padding, pad_value, (p.oh, p.ow), cols);
                weight_grad(cols, &mut dw);
            });
            if need_input {
                par::with_scratch(len, |dcols| {
                    input_grad(dcols);
                    col2im_add(dcols, (p.c, p.h, p.w), p.k, stride, padding, (p.oh, p.ow), dx);
                });
            }
        }
        dw
    });
    let grad_w = FloatTensor::new(w.shape().to_vec(), par::sum_in_order(per_image, wd.len()))?;
    Ok((need_input.then_some(grad_x), grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn naive(x: &FloatTensor, w: &FloatTensor, stride: usize, pad: usize, groups: usize, pad_value: f64) -> FloatTensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, cg, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let og = o / groups;
        FloatTensor::from_fn(&[n, o, oh, ow], |idx| {
            let (img, oc, oy, ox) = (idx / (o * oh * ow), (idx / (oh * ow)) % o, (idx / ow) % oh, idx % ow);
            let g = oc / og;
            let mut s = 0.0;
            for ci in 0..cg {
                let cin = g * cg + ci;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                            pad_value
                        } else {
                            x.data()[((img * c + cin) * h + iy as usize) * wd + ix as usize]
                        };
                        s += v * w.data()[((oc * cg + ci) * k + ky) * k + kx];
                    }
                }
            }
            let _ = c;
            s
        })
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> FloatTensor {
        FloatTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_over_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(c, o, k, s, pad, g) in &[
            (3, 4, 3, 1, 1, 1),
            (4, 8, 1, 1, 0, 4),
            (4, 4, 3, 2, 1, 2),
            (2, 6, 1, 2, 0, 1),
            (6, 6, 3, 1, 0, 3),
        ] {
            let x = rand_tensor(&mut rng, &[2, c, 5, 6]);
            let w = rand_tensor(&mut rng, &[o, c / g, k, k]);
            for pv in [0.0, -1.0] {
                let a = conv2d(&x, &w, s, pad, g, pv, None).unwrap();
                let b = naive(&x, &w, s, pad, g, pv);
                assert_eq!(a.shape(), b.shape());
                assert!(a.max_abs_diff(&b) < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let mut w = FloatTensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(real_conv2d(&x, &w, 1, 0, 1).unwrap(), x);
        let dw = FloatTensor::full(&[3, 1, 1, 1], 1.0);
        assert_eq!(real_conv2d(&x, &dw, 1, 0, 3).unwrap(), x);
    }

    #[test]
    fn grouped_equals_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (c, o, g) = (8, 8, 4);
        let x = rand_tensor(&mut rng, &[2, c, 3, 3]);
        let wg = rand_tensor(&mut rng, &[o, c / g, 1, 1]);
        let mut full = FloatTensor::zeros(&[o, c, 1, 1]);
        for oc in 0..o {
            let grp = oc / (o / g);
            for ci in 0..c / g {
                full.data_mut()[oc * c + grp * (c / g) + ci] = wg.data()[oc * (c / g) + ci];
            }
        }
        let a = real_conv2d(&x, &wg, 1, 0, g).unwrap();
        let b = real_conv2d(&x, &full, 1, 0, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn bad_groups_rejected() {
        let x = FloatTensor::zeros(&[1, 6, 2, 2]);
        let w = FloatTensor::zeros(&[4, 3, 1, 1]);
        assert!(real_conv2d(&x, &w, 1, 0, 4).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for &(c, o, k, s, pad, g, pv) in &[(2, 4, 3, 1, 1, 2, -1.0), (4, 4, 3, 2, 1, 1, 0.0), (4, 8, 1, 1, 0, 4, 0.0)] {
            let x = rand_tensor(&mut rng, &[2, c, 4, 4]);
            let w = rand_tensor(&mut rng, &[o, c / g, k, k]);
            let y = conv2d(&x, &w, s, pad, g, pv, None).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let loss = |x: &FloatTensor, w: &FloatTensor| -> f64 {
                let y = conv2d(x, w, s, pad, g, pv, None).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let (gx, gw) = conv2d_backward(&x, &w, &r, s, pad, g, pv, true).unwrap();
            let gx = gx.unwrap();
            let h = 1e-5;
            for i in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp.data_mut()[i] += h;
                wm.data_mut()[i] -= h;
                let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
                assert!((fd - gw.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
                assert!((fd - gx.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
