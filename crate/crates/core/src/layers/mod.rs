//! Real-valued supporting layers: batch norm, pooling, fully-connected,
//! dense convolution and softmax.

mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormParams, BN_EPSILON,
    BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, real_conv2d, ConvGeometry};
pub use linear::{fc_backward, fc_forward, Linear, LinearGrads};
pub use pool::{avgpool2x2, avgpool2x2_backward, global_avgpool, global_avgpool_backward};

pub(crate) use linear::fc_forward_tallied;

use crate::error::Result;
use crate::tensor::FloatTensor;

/// Row-wise log-softmax of `(N, K)` logits.
pub fn log_softmax(logits: &FloatTensor) -> Result<FloatTensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

/// Row-wise softmax of `(N, K)` logits, computed after subtracting the row max.
pub fn softmax(logits: &FloatTensor) -> Result<FloatTensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}
