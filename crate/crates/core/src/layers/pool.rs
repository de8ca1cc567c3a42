use crate::error::Result;
use crate::tensor::FloatTensor;

/// 2x2 / stride 2 average pooling. Odd sizes replicate the last row/column.
pub fn avgpool2x2(x: &FloatTensor) -> Result<FloatTensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let src = x.data();
    Ok(FloatTensor::from_fn(&[n, c, oh, ow], |idx| {
        let map = idx / (oh * ow);
        let (oy, ox) = ((idx / ow) % oh, idx % ow);
        let base = map * h * w;
        let (y0, x0) = (2 * oy, 2 * ox);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        0.25 * (src[base + y0 * w + x0] + src[base + y0 * w + x1] + src[base + y1 * w + x0] + src[base + y1 * w + x1])
    }))
}

pub fn avgpool2x2_backward(input_shape: &[usize], upstream: &FloatTensor) -> Result<FloatTensor> {
    let mut grad = FloatTensor::zeros(input_shape);
    let (n, c, h, w) = grad.dims4()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    upstream.ensure_shape(&[n, c, oh, ow])?;
    let g = grad.data_mut();
    for (idx, &u) in upstream.data().iter().enumerate() {
        let map = idx / (oh * ow);
        let (oy, ox) = ((idx / ow) % oh, idx % ow);
        let base = map * h * w;
        let (y0, x0) = (2 * oy, 2 * ox);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        for (yy, xx) in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)] {
            g[base + yy * w + xx] += 0.25 * u;
        }
    }
    Ok(grad)
}

/// Mean over the spatial plane: `(N, C, H, W) -> (N, C)`.
pub fn global_avgpool(x: &FloatTensor) -> Result<FloatTensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|s| s.iter().sum::<f64>() / plane as f64)
        .collect();
    FloatTensor::new(vec![n, c], data)
}

pub fn global_avgpool_backward(input_shape: &[usize], upstream: &FloatTensor) -> Result<FloatTensor> {
    let mut grad = FloatTensor::zeros(input_shape);
    let (n, c, h, w) = grad.dims4()?;
    upstream.ensure_shape(&[n, c])?;
    let plane = h * w;
    for (chunk, &u) in grad.data_mut().chunks_mut(plane).zip(upstream.data()) {
        chunk.iter_mut().for_each(|v| *v = u / plane as f64);
    }
    Ok(grad)
}
