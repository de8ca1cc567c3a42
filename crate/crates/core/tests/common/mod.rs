//! Helpers shared by integration test targets.

use reactnet::FloatTensor;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Nested-loop convolution; out-of-range taps read the -1 padding value.
pub fn dense_reference(x: &FloatTensor, w: &FloatTensor, stride: usize, pad: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (o, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let per = c * k * k;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for img in 0..n {
        for oc in 0..o {
            let filt = &w.data()[oc * per..(oc + 1) * per];
            let scale = filt.iter().map(|v| v.abs()).sum::<f64>() / per as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    -1.0
                                } else {
                                    x.data()[((img * c + ci) * h + iy as usize) * wd + ix as usize]
                                };
                                acc += v * scale * sign(filt[(ci * k + ky) * k + kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}
