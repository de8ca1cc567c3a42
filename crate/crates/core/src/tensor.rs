//! Dense `f64` tensors and bit-packed ±1 tensors.
//!
//! Feature maps are NCHW and convolution weights OIHW, both row-major.
//! A [`BitTensor`] stores one bit per element in 64-bit words: bit 1 is +1,
//! bit 0 is -1, and the unused tail of the last word is always zero.

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// Number of 64-bit words needed for `len` bits.
#[inline]
pub fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::LengthMismatch {
                left: numel,
                right: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                found: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                found: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &FloatTensor) -> Result<()> {
        other.ensure_shape(&self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &FloatTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    len: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// All-(-1) tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            len,
            words: vec![0; words_for(len)],
        }
    }

    pub fn from_bits(shape: &[usize], bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        let mut t = Self::zeros(shape);
        let mut count = 0;
        for (i, b) in bits.into_iter().enumerate() {
            if i >= t.len {
                return Err(Error::LengthMismatch {
                    left: t.len,
                    right: i + 1,
                });
            }
            if b {
                t.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
            count += 1;
        }
        if count != t.len {
            return Err(Error::LengthMismatch {
                left: t.len,
                right: count,
            });
        }
        Ok(t)
    }

    /// Builds from raw words; the padding bits of the last word are cleared.
    pub fn from_words(shape: &[usize], mut words: Vec<u64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if words.len() != words_for(len) {
            return Err(Error::LengthMismatch {
                left: words_for(len),
                right: words.len(),
            });
        }
        let tail = len % WORD_BITS;
        if tail != 0 {
            let last = words.len() - 1;
            words[last] &= (1u64 << tail) - 1;
        }
        Ok(Self {
            shape: shape.to_vec(),
            len,
            words,
        })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `true` encodes +1.
    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, positive: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % WORD_BITS);
        if positive {
            self.words[i / WORD_BITS] |= mask;
        } else {
            self.words[i / WORD_BITS] &= !mask;
        }
    }

    /// Number of +1 elements.
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn padding_is_clear(&self) -> bool {
        let tail = self.len % WORD_BITS;
        tail == 0 || self.words.last().is_none_or(|w| w >> tail == 0)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "expected a rank-4 bit tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn unpack(&self) -> FloatTensor {
        unpack(self)
    }
}

/// Packs a tensor whose entries are all exactly ±1.
pub fn pack(t: &FloatTensor) -> Result<BitTensor> {
    let mut out = BitTensor::zeros(t.shape());
    for (wi, chunk) in t.data().chunks(WORD_BITS).enumerate() {
        let mut word = 0u64;
        for (bi, &v) in chunk.iter().enumerate() {
            if v == 1.0 {
                word |= 1 << bi;
            } else if v != -1.0 {
                return Err(Error::NotBinary {
                    index: wi * WORD_BITS + bi,
                    value: v,
                });
            }
        }
        out.words[wi] = word;
    }
    Ok(out)
}

pub fn unpack(b: &BitTensor) -> FloatTensor {
    let data = (0..b.len)
        .map(|i| if b.get(i) { 1.0 } else { -1.0 })
        .collect();
    FloatTensor {
        shape: b.shape.clone(),
        data,
    }
}
