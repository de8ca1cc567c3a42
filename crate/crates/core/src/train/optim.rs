use crate::arch::ParamView;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// `initial * (1 - step / total)`.
pub fn linear_lr(initial: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return initial;
    }
    initial * (1.0 - step as f64 / total as f64)
}

/// One Adam update of a single tensor. L2 decay is added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    if t == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// Adam moments for every trainable tensor of a network, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[ParamView<'_>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            t: 0,
        }
    }

    /// Updates every parameter. Decay reaches only kinds for which
    /// `takes_weight_decay` holds.
    pub fn step(&mut self, params: &mut [ParamView<'_>], grads: &[ParamView<'_>], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.name != g.name {
                return Err(Error::InvalidArgument(format!("gradient `{}` for parameter `{}`", g.name, p.name)));
            }
            let wd = if p.kind.takes_weight_decay() { weight_decay } else { 0.0 };
            adam_step(p.values, g.values, &mut self.m[i], &mut self.v[i], self.t, lr, wd)?;
        }
        Ok(())
    }
}
