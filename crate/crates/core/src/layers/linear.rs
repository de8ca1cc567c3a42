use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::opscount::OpTally;
use crate::tensor::FloatTensor;

/// Fully-connected layer, `weight` is `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: FloatTensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub grad_x: FloatTensor,
    pub weight: FloatTensor,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: FloatTensor, bias: Vec<f64>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.len() != out {
            return Err(Error::LengthMismatch {
                left: out,
                right: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn fc_forward(x: &FloatTensor, layer: &Linear) -> Result<FloatTensor> {
    fc_forward_tallied(x, layer, None)
}

pub(crate) fn fc_forward_tallied(x: &FloatTensor, layer: &Linear, tally: Option<&OpTally>) -> Result<FloatTensor> {
    let (n, fin) = x.dims2()?;
    if fin != layer.in_features() {
        return Err(Error::ShapeMismatch {
            expected: vec![n, layer.in_features()],
            found: x.shape().to_vec(),
        });
    }
    let fout = layer.out_features();
    let mut out = FloatTensor::from_fn(&[n, fout], |i| layer.bias[i % fout]);
    gemm(n, fout, fin, x.data(), false, layer.weight.data(), true, out.data_mut(), 1.0);
    if let Some(t) = tally {
        t.add_real((n * fout * fin) as u64);
    }
    Ok(out)
}

pub fn fc_backward(x: &FloatTensor, layer: &Linear, upstream: &FloatTensor) -> Result<LinearGrads> {
    let (n, fin) = x.dims2()?;
    let fout = layer.out_features();
    upstream.ensure_shape(&[n, fout])?;
    let mut grad_x = FloatTensor::zeros(&[n, fin]);
    gemm(n, fin, fout, upstream.data(), false, layer.weight.data(), false, grad_x.data_mut(), 0.0);
    let mut weight = FloatTensor::zeros(&[fout, fin]);
    gemm(fout, fin, n, upstream.data(), true, x.data(), false, weight.data_mut(), 0.0);
    let mut bias = vec![0.0; fout];
    for row in upstream.data().chunks(fout) {
        for (b, g) in bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(LinearGrads { grad_x, weight, bias })
}
