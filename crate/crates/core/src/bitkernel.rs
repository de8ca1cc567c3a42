//! 1-bit convolution via XNOR + popcount.
//!
//! A binary dot product of two ±1 vectors of length `n` is
//! `2 * agreements - n`, where agreements is the popcount of the XNOR of the
//! encoded words. Weights are binarized per output filter as
//! `scale[o] * sign(w)` with `scale[o]` the mean absolute value of the filter;
//! activations carry no scale. Padding around a binary feature map is -1.

use crate::error::{Error, Result};
use crate::opscount::OpTally;
use crate::par;
use crate::tensor::{words_for, BitTensor, FloatTensor, WORD_BITS};

/// Row-major bit matrix; each row starts on a word boundary and its padding
/// bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.row(r)[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    /// Row `r` as a standalone bit vector.
    pub fn row_tensor(&self, r: usize) -> BitTensor {
        BitTensor::from_words(&[self.cols], self.row(r).to_vec()).expect("row is well formed")
    }
}

/// Agreement-based ±1 dot product over word slices holding `n` valid bits.
#[inline]
pub fn dot_words(a: &[u64], b: &[u64], n: usize) -> i32 {
    let agree: u32 = a.iter().zip(b).map(|(x, y)| (!(x ^ y)).count_ones()).sum();
    // Zero padding bits agree with each other and must not be counted.
    let padding = (a.len() * WORD_BITS - n) as u32;
    2 * (agree - padding) as i32 - n as i32
}

/// ±1 dot product of two equal-length bit vectors.
pub fn xnor_popcount_dot(a: &BitTensor, b: &BitTensor) -> Result<i64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_words(a.words(), b.words(), a.len()) as i64)
}

/// Per-output-channel mean absolute weight.
pub fn compute_scale(w: &FloatTensor) -> Result<Vec<f64>> {
    let (o, i, kh, kw) = w.dims4()?;
    let n = i * kh * kw;
    if o == 0 || n == 0 {
        return Err(Error::InvalidShape(format!("empty filter bank {:?}", w.shape())));
    }
    Ok(w.data()
        .chunks(n)
        .map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / n as f64)
        .collect())
}

#[derive(Clone, Debug)]
pub struct BinaryConvParams {
    real_weights: FloatTensor,
    packed: BitMatrix,
    scale: Vec<f64>,
}

impl BinaryConvParams {
    pub fn new(real_weights: FloatTensor) -> Result<Self> {
        let scale = compute_scale(&real_weights)?;
        let (o, i, kh, kw) = real_weights.dims4()?;
        let n = i * kh * kw;
        let mut packed = BitMatrix::zeros(o, n);
        for oc in 0..o {
            let filter = &real_weights.data()[oc * n..(oc + 1) * n];
            let row = &mut packed.words[oc * packed.words_per_row..(oc + 1) * packed.words_per_row];
            for (j, &v) in filter.iter().enumerate() {
                if v > 0.0 {
                    row[j / WORD_BITS] |= 1 << (j % WORD_BITS);
                }
            }
        }
        Ok(Self {
            real_weights,
            packed,
            scale,
        })
    }

    pub fn real_weights(&self) -> &FloatTensor {
        &self.real_weights
    }

    pub fn packed_weights(&self) -> &BitMatrix {
        &self.packed
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// `(out_channels, in_channels, kh, kw)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.real_weights.dims4().expect("validated in new")
    }
}

pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::InvalidShape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Fills `row` (one output position) with the receptive field of `(oy, ox)`
/// in image `img` of `x`.
#[allow(clippy::too_many_arguments)]
fn gather_patch(
    x: &BitTensor,
    img: usize,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oy, ox): (usize, usize),
    row: &mut [u64],
) {
    let base = img * c * h * w;
    let mut col = 0;
    for ci in 0..c {
        for ky in 0..kh {
            let iy = (oy * stride + ky) as isize - padding as isize;
            for kx in 0..kw {
                let ix = (ox * stride + kx) as isize - padding as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    let idx = base + ci * h * w + iy as usize * w + ix as usize;
                    if x.get(idx) {
                        row[col / WORD_BITS] |= 1 << (col % WORD_BITS);
                    }
                }
                col += 1;
            }
        }
    }
}

/// Bit-packed im2col: one row per output position (image-major), one column
/// per patch element in `(channel, ky, kx)` order.
pub fn im2col(x: &BitTensor, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<BitMatrix> {
    let (n, c, h, w) = x.dims4()?;
    let oh = conv_out_size(h, kh, stride, padding)?;
    let ow = conv_out_size(w, kw, stride, padding)?;
    let mut m = BitMatrix::zeros(n * oh * ow, c * kh * kw);
    let wpr = m.words_per_row;
    for r in 0..m.rows {
        let img = r / (oh * ow);
        let pos = r % (oh * ow);
        let row = &mut m.words[r * wpr..(r + 1) * wpr];
        gather_patch(x, img, (c, h, w), (kh, kw), stride, padding, (pos / ow, pos % ow), row);
    }
    Ok(m)
}

/// XNOR-popcount convolution of a binary feature map with binarized weights.
pub fn binary_conv2d(
    x: &BitTensor,
    w: &BinaryConvParams,
    stride: usize,
    padding: usize,
) -> Result<FloatTensor> {
    binary_conv2d_tallied(x, w, stride, padding, None)
}

pub(crate) fn binary_conv2d_tallied(
    x: &BitTensor,
    w: &BinaryConvParams,
    stride: usize,
    padding: usize,
    tally: Option<&OpTally>,
) -> Result<FloatTensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims();
    if c != wc {
        return Err(Error::ChannelMismatch {
            expected: wc,
            found: c,
        });
    }
    let oh = conv_out_size(h, kh, stride, padding)?;
    let ow = conv_out_size(wd, kw, stride, padding)?;
    if n == 0 || oh == 0 || ow == 0 {
        return Err(Error::InvalidShape("zero-size convolution output".into()));
    }
    let k = c * kh * kw;
    let wpr = words_for(k);
    let plane = oh * ow;
    let mut out = FloatTensor::zeros(&[n, o, oh, ow]);
    par::for_each_chunk_mut(out.data_mut(), o * plane, |img, dst| {
        let mut patch = vec![0u64; wpr];
        for pos in 0..plane {
            patch.iter_mut().for_each(|v| *v = 0);
            gather_patch(x, img, (c, h, wd), (kh, kw), stride, padding, (pos / ow, pos % ow), &mut patch);
            for oc in 0..o {
                let acc = dot_words(&patch, w.packed.row(oc), k);
                dst[oc * plane + pos] = w.scale[oc] * acc as f64;
            }
        }
    });
    if let Some(t) = tally {
        t.add_binary((n * plane * o * k) as u64);
    }
    Ok(out)
}
