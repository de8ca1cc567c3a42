//! Executable network built from a [`NetworkSpec`].
//!
//! Each conv unit runs `sign -> conv -> BN -> (+ shortcut) -> activation`.
//! The shortcut taps the real-valued tensor entering the unit. Training
//! passes record a [`Tape`] that [`Network::backward`] consumes.

use rand::Rng;

use super::spec::{BlockKind, Downsample, NetworkSpec, Precision};
use crate::activations::{
    approx_sign, rprelu_backward, rprelu_forward, rsign_backward, rsign_forward, rsign_values, RPReLUParams,
    RSignParams,
};
use crate::bitkernel::{binary_conv2d_tallied, compute_scale, BinaryConvParams};
use crate::error::{Error, Result};
use crate::layers::{
    avgpool2x2, avgpool2x2_backward, batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward,
    fc_backward, fc_forward_tallied, global_avgpool, global_avgpool_backward, BatchNormCache, BatchNormParams,
    Linear,
};
use crate::activations::weight_binarize_backward;
use crate::opscount::OpTally;
use crate::tensor::FloatTensor;

/// Latent binary weights are clipped to this magnitude after each update.
pub const LATENT_WEIGHT_CLIP: f64 = 1.05;

/// Role of a stored tensor, used for weight decay, clipping and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    /// Weight of a real-valued convolution.
    ConvWeight,
    /// Latent real weight behind a 1-bit convolution.
    LatentWeight,
    FcWeight,
    FcBias,
    BnGamma,
    BnBeta,
    Alpha,
    Beta,
    Gamma,
    Zeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv-weight",
            ParamKind::LatentWeight => "latent-weight",
            ParamKind::FcWeight => "fc-weight",
            ParamKind::FcBias => "fc-bias",
            ParamKind::BnGamma => "bn-gamma",
            ParamKind::BnBeta => "bn-beta",
            ParamKind::Alpha => "alpha",
            ParamKind::Beta => "beta",
            ParamKind::Gamma => "gamma",
            ParamKind::Zeta => "zeta",
            ParamKind::RunningMean => "running-mean",
            ParamKind::RunningVar => "running-var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// L2 decay applies to conv and FC weights only.
    pub fn takes_weight_decay(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LatentWeight | ParamKind::FcWeight)
    }
}

/// Mutable view of one named tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: &'a mut [f64],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SignMode {
    /// Real-valued input passes straight to the conv.
    Identity,
    Sign,
    RSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ActMode {
    /// PReLU with its slope frozen at the initial value.
    FixedPrelu,
    /// PReLU with a learnable slope.
    Prelu,
    RPReLU,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shortcut {
    None,
    Identity,
    AvgPool,
}

/// Values recorded at the anchor point of a surrogate replay.
#[derive(Clone, Debug)]
struct UnitAnchor {
    x: FloatTensor,
    alpha: Vec<f64>,
    signs: FloatTensor,
    weight: FloatTensor,
    upper: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Unit {
    sign: SignMode,
    alpha: RSignParams,
    weight: FloatTensor,
    stride: usize,
    groups: usize,
    bn: BatchNormParams,
    shortcut: Shortcut,
    act: ActMode,
    rprelu: RPReLUParams,
    anchor: Option<UnitAnchor>,
}

#[derive(Clone, Debug)]
struct UnitTape {
    x: FloatTensor,
    signs: FloatTensor,
    weight: FloatTensor,
    bn: BatchNormCache,
    pre: FloatTensor,
}

fn channel_of(i: usize, c: usize, plane: usize) -> usize {
    (i / plane) % c
}

impl Unit {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rng: &mut impl Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        sign: SignMode,
        act: ActMode,
        shortcut: Shortcut,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = FloatTensor::from_fn(&[cout, cin / groups, kernel, kernel], |_| rng.gen_range(-bound..bound));
        Self {
            sign,
            alpha: RSignParams::new(cin),
            weight,
            stride,
            groups,
            bn: BatchNormParams::new(cout),
            shortcut,
            act,
            rprelu: RPReLUParams::new(cout),
            anchor: None,
        }
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn is_binary(&self) -> bool {
        self.sign != SignMode::Identity
    }

    fn pad_value(&self) -> f64 {
        if self.is_binary() {
            -1.0
        } else {
            0.0
        }
    }

    /// Weights seen by the convolution: `scale * sign(w)` once weights are
    /// binarized, the latent weights otherwise.
    fn effective_weight(&self, binary_weights: bool) -> Result<FloatTensor> {
        if !(self.is_binary() && binary_weights) {
            return Ok(self.weight.clone());
        }
        let scale = compute_scale(&self.weight)?;
        let n = self.weight.len() / scale.len();
        if let Some(a) = &self.anchor {
            // s(w) * sign(w0) + s(w0) * (clip(w) - clip(w0))
            let s0 = compute_scale(&a.weight)?;
            return Ok(FloatTensor::from_fn(self.weight.shape(), |i| {
                let o = i / n;
                let (w, w0) = (self.weight.data()[i], a.weight.data()[i]);
                let sign0 = if w0 > 0.0 { 1.0 } else { -1.0 };
                scale[o] * sign0 + s0[o] * (w.clamp(-1.0, 1.0) - w0.clamp(-1.0, 1.0))
            }));
        }
        Ok(FloatTensor::from_fn(self.weight.shape(), |i| {
            let s = scale[i / n];
            if self.weight.data()[i] > 0.0 {
                s
            } else {
                -s
            }
        }))
    }

    fn binarize_input(&self, x: &FloatTensor) -> Result<FloatTensor> {
        match (&self.anchor, self.sign) {
            (_, SignMode::Identity) => Ok(x.clone()),
            (None, _) => rsign_values(x, &self.alpha),
            (Some(a), _) => {
                // s0 + A(x - a0) - A(x0 - a0) - (a - a0)
                let (_, c, plane) = crate::activations::channel_layout(x)?;
                x.ensure_shape(a.x.shape())?;
                Ok(FloatTensor::from_fn(x.shape(), |i| {
                    let ch = channel_of(i, c, plane);
                    let a0 = a.alpha[ch];
                    a.signs.data()[i] + approx_sign(x.data()[i] - a0)
                        - approx_sign(a.x.data()[i] - a0)
                        - (self.alpha.alpha[ch] - a0)
                }))
            }
        }
    }

    fn activate(&self, pre: &FloatTensor) -> Result<FloatTensor> {
        let Some(a) = &self.anchor else {
            return rprelu_forward(pre, &self.rprelu);
        };
        let (_, c, plane) = crate::activations::channel_layout(pre)?;
        let p = &self.rprelu;
        Ok(FloatTensor::from_fn(pre.shape(), |i| {
            let ch = channel_of(i, c, plane);
            let v = pre.data()[i] - p.gamma[ch];
            if a.upper[i] {
                v + p.zeta[ch]
            } else {
                p.beta[ch] * v + p.zeta[ch]
            }
        }))
    }

    fn forward(
        &mut self,
        x: &FloatTensor,
        training: bool,
        binary_weights: bool,
        tally: Option<&OpTally>,
    ) -> Result<(FloatTensor, Option<UnitTape>)> {
        let k = self.kernel();
        let use_bits = !training && self.is_binary() && binary_weights && self.anchor.is_none();
        let (conv, signs, weight) = if use_bits {
            let bits = rsign_forward(x, &self.alpha)?;
            let params = BinaryConvParams::new(self.weight.clone())?;
            let out = binary_conv2d_tallied(&bits, &params, self.stride, k / 2, tally)?;
            (out, None, None)
        } else {
            let signs = self.binarize_input(x)?;
            let weight = self.effective_weight(binary_weights)?;
            let out = conv2d(&signs, &weight, self.stride, k / 2, self.groups, self.pad_value(), tally)?;
            (out, Some(signs), Some(weight))
        };
        let (mut pre, bn) = batchnorm_forward(&conv, &mut self.bn, training)?;
        match self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => pre.add_assign(x)?,
            Shortcut::AvgPool => pre.add_assign(&avgpool2x2(x)?)?,
        }
        let out = self.activate(&pre)?;
        let tape = match (training, signs, weight) {
            (true, Some(signs), Some(weight)) => Some(UnitTape {
                x: x.clone(),
                signs,
                weight,
                bn,
                pre,
            }),
            _ => None,
        };
        Ok((out, tape))
    }

    /// Records the current point as the anchor of a surrogate replay.
    fn record_anchor(&mut self, tape: &UnitTape) {
        let (_, c, plane) = crate::activations::channel_layout(&tape.pre).expect("tape shapes are valid");
        let upper = tape
            .pre
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v > self.rprelu.gamma[channel_of(i, c, plane)])
            .collect();
        self.anchor = Some(UnitAnchor {
            x: tape.x.clone(),
            alpha: self.alpha.alpha.clone(),
            signs: tape.signs.clone(),
            weight: self.weight.clone(),
            upper,
        });
    }

    fn backward(
        &self,
        tape: &UnitTape,
        upstream: &FloatTensor,
        binary_weights: bool,
        grads: &mut Unit,
    ) -> Result<FloatTensor> {
        let act = rprelu_backward(&tape.pre, &self.rprelu, upstream)?;
        match self.act {
            ActMode::FixedPrelu => {}
            ActMode::Prelu => grads.rprelu.beta = act.beta,
            ActMode::RPReLU => {
                grads.rprelu.beta = act.beta;
                grads.rprelu.gamma = act.gamma;
                grads.rprelu.zeta = act.zeta;
            }
        }
        let g_pre = act.grad_x;
        let bn = batchnorm_backward(&tape.bn, &self.bn, &g_pre)?;
        grads.bn.gamma = bn.gamma;
        grads.bn.beta = bn.beta;
        let k = self.kernel();
        let (g_signs, g_weight) = conv2d_backward(
            &tape.signs,
            &tape.weight,
            &bn.grad_x,
            self.stride,
            k / 2,
            self.groups,
            self.pad_value(),
            true,
        )?;
        grads.weight = if self.is_binary() && binary_weights {
            weight_binarize_backward(&self.weight, &g_weight)?
        } else {
            g_weight
        };
        let g_signs = g_signs.expect("input gradient requested");
        let mut gx = match self.sign {
            SignMode::Identity => g_signs,
            SignMode::Sign | SignMode::RSign => {
                let (gx, ga) = rsign_backward(&tape.x, &self.alpha, &g_signs)?;
                if self.sign == SignMode::RSign {
                    grads.alpha.alpha = ga;
                }
                gx
            }
        };
        match self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => gx.add_assign(&g_pre)?,
            Shortcut::AvgPool => gx.add_assign(&avgpool2x2_backward(tape.x.shape(), &g_pre)?)?,
        }
        Ok(gx)
    }

    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        let weight_kind = if self.is_binary() {
            ParamKind::LatentWeight
        } else {
            ParamKind::ConvWeight
        };
        let shape = self.weight.shape().to_vec();
        out.push(ParamView {
            name: format!("{prefix}.conv.weight"),
            kind: weight_kind,
            shape,
            values: self.weight.data_mut(),
        });
        if self.sign == SignMode::RSign {
            let c = self.alpha.alpha.len();
            out.push(ParamView {
                name: format!("{prefix}.rsign.alpha"),
                kind: ParamKind::Alpha,
                shape: vec![c],
                values: &mut self.alpha.alpha,
            });
        }
        let c = self.bn.channels();
        let bn = &mut self.bn;
        out.push(ParamView {
            name: format!("{prefix}.bn.gamma"),
            kind: ParamKind::BnGamma,
            shape: vec![c],
            values: &mut bn.gamma,
        });
        out.push(ParamView {
            name: format!("{prefix}.bn.beta"),
            kind: ParamKind::BnBeta,
            shape: vec![c],
            values: &mut bn.beta,
        });
        out.push(ParamView {
            name: format!("{prefix}.bn.running_mean"),
            kind: ParamKind::RunningMean,
            shape: vec![c],
            values: &mut bn.running_mean,
        });
        out.push(ParamView {
            name: format!("{prefix}.bn.running_var"),
            kind: ParamKind::RunningVar,
            shape: vec![c],
            values: &mut bn.running_var,
        });
        let p = &mut self.rprelu;
        match self.act {
            ActMode::FixedPrelu => {}
            ActMode::Prelu => out.push(ParamView {
                name: format!("{prefix}.prelu.beta"),
                kind: ParamKind::Beta,
                shape: vec![c],
                values: &mut p.beta,
            }),
            ActMode::RPReLU => {
                out.push(ParamView {
                    name: format!("{prefix}.rprelu.beta"),
                    kind: ParamKind::Beta,
                    shape: vec![c],
                    values: &mut p.beta,
                });
                out.push(ParamView {
                    name: format!("{prefix}.rprelu.gamma"),
                    kind: ParamKind::Gamma,
                    shape: vec![c],
                    values: &mut p.gamma,
                });
                out.push(ParamView {
                    name: format!("{prefix}.rprelu.zeta"),
                    kind: ParamKind::Zeta,
                    shape: vec![c],
                    values: &mut p.zeta,
                });
            }
        }
    }

    fn coefficient_groups(&self) -> Vec<(&'static str, &[f64])> {
        let mut v = Vec::new();
        if self.is_binary() {
            v.push(("alpha", self.alpha.alpha.as_slice()));
        }
        v.push(("beta", self.rprelu.beta.as_slice()));
        v.push(("gamma", self.rprelu.gamma.as_slice()));
        v.push(("zeta", self.rprelu.zeta.as_slice()));
        v
    }
}

#[derive(Clone, Debug)]
enum Block {
    Normal { conv3: Unit, conv1: Unit },
    /// `pointwise` holds two parallel units whose outputs are concatenated,
    /// or a single unit that doubles the channel count.
    Reduction { conv3: Unit, pointwise: Vec<Unit> },
}

#[derive(Clone, Debug)]
enum BlockTape {
    Normal(UnitTape, UnitTape),
    Reduction(UnitTape, Vec<UnitTape>),
}

fn concat_channels(parts: &[FloatTensor]) -> Result<FloatTensor> {
    let (n, _, h, w) = parts[0].dims4()?;
    let plane = h * w;
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * total * plane);
    for img in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[img * c * plane..(img + 1) * c * plane]);
        }
    }
    FloatTensor::new(vec![n, total, h, w], data)
}

fn split_channels(x: &FloatTensor, parts: usize) -> Result<Vec<FloatTensor>> {
    let (n, c, h, w) = x.dims4()?;
    let cp = c / parts;
    let plane = h * w;
    Ok((0..parts)
        .map(|p| {
            let mut data = Vec::with_capacity(n * cp * plane);
            for img in 0..n {
                let base = (img * c + p * cp) * plane;
                data.extend_from_slice(&x.data()[base..base + cp * plane]);
            }
            FloatTensor::new(vec![n, cp, h, w], data).expect("split sizes are consistent")
        })
        .collect())
}

impl Block {
    fn units_mut(&mut self) -> Vec<&mut Unit> {
        match self {
            Block::Normal { conv3, conv1 } => vec![conv3, conv1],
            Block::Reduction { conv3, pointwise } => std::iter::once(conv3).chain(pointwise.iter_mut()).collect(),
        }
    }

    fn units(&self) -> Vec<&Unit> {
        match self {
            Block::Normal { conv3, conv1 } => vec![conv3, conv1],
            Block::Reduction { conv3, pointwise } => std::iter::once(conv3).chain(pointwise.iter()).collect(),
        }
    }

    fn unit_names(&self) -> Vec<String> {
        match self {
            Block::Normal { .. } => vec!["conv3x3".into(), "conv1x1".into()],
            Block::Reduction { pointwise, .. } if pointwise.len() == 1 => vec!["conv3x3".into(), "conv1x1".into()],
            Block::Reduction { pointwise, .. } => std::iter::once("conv3x3".to_string())
                .chain((0..pointwise.len()).map(|i| format!("conv1x1.{i}")))
                .collect(),
        }
    }

    fn forward(
        &mut self,
        x: &FloatTensor,
        training: bool,
        binary_weights: bool,
        tally: Option<&OpTally>,
    ) -> Result<(FloatTensor, Option<BlockTape>)> {
        match self {
            Block::Normal { conv3, conv1 } => {
                let (y, t3) = conv3.forward(x, training, binary_weights, tally)?;
                let (z, t1) = conv1.forward(&y, training, binary_weights, tally)?;
                Ok((z, t3.zip(t1).map(|(a, b)| BlockTape::Normal(a, b))))
            }
            Block::Reduction { conv3, pointwise } => {
                let (y, t3) = conv3.forward(x, training, binary_weights, tally)?;
                let mut outs = Vec::with_capacity(pointwise.len());
                let mut tapes = Vec::with_capacity(pointwise.len());
                for u in pointwise.iter_mut() {
                    let (o, t) = u.forward(&y, training, binary_weights, tally)?;
                    outs.push(o);
                    tapes.extend(t);
                }
                let out = if outs.len() == 1 {
                    outs.pop().expect("one output")
                } else {
                    concat_channels(&outs)?
                };
                let tape = match t3 {
                    Some(t3) if tapes.len() == pointwise.len() => Some(BlockTape::Reduction(t3, tapes)),
                    _ => None,
                };
                Ok((out, tape))
            }
        }
    }

    fn record_anchor(&mut self, tape: &BlockTape) {
        match (self, tape) {
            (Block::Normal { conv3, conv1 }, BlockTape::Normal(a, b)) => {
                conv3.record_anchor(a);
                conv1.record_anchor(b);
            }
            (Block::Reduction { conv3, pointwise }, BlockTape::Reduction(a, rest)) => {
                conv3.record_anchor(a);
                for (u, t) in pointwise.iter_mut().zip(rest) {
                    u.record_anchor(t);
                }
            }
            _ => unreachable!("tape recorded by this block"),
        }
    }

    fn backward(
        &self,
        tape: &BlockTape,
        upstream: &FloatTensor,
        binary_weights: bool,
        grads: &mut Block,
    ) -> Result<FloatTensor> {
        match (self, tape, grads) {
            (Block::Normal { conv3, conv1 }, BlockTape::Normal(t3, t1), Block::Normal { conv3: g3, conv1: g1 }) => {
                let gy = conv1.backward(t1, upstream, binary_weights, g1)?;
                conv3.backward(t3, &gy, binary_weights, g3)
            }
            (
                Block::Reduction { conv3, pointwise },
                BlockTape::Reduction(t3, tapes),
                Block::Reduction {
                    conv3: g3,
                    pointwise: gp,
                },
            ) => {
                let parts = if pointwise.len() == 1 {
                    vec![upstream.clone()]
                } else {
                    split_channels(upstream, pointwise.len())?
                };
                let mut gy: Option<FloatTensor> = None;
                for ((u, t), (g, part)) in pointwise.iter().zip(tapes).zip(gp.iter_mut().zip(&parts)) {
                    let gi = u.backward(t, part, binary_weights, g)?;
                    match gy.as_mut() {
                        Some(acc) => acc.add_assign(&gi)?,
                        None => gy = Some(gi),
                    }
                }
                conv3.backward(t3, &gy.expect("at least one pointwise unit"), binary_weights, g3)
            }
            _ => unreachable!("tape recorded by this block"),
        }
    }
}

/// Activations recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    input: FloatTensor,
    stem_bn: BatchNormCache,
    blocks: Vec<BlockTape>,
    features: FloatTensor,
    pooled: FloatTensor,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    stem_weight: FloatTensor,
    stem_stride: usize,
    stem_bn: BatchNormParams,
    blocks: Vec<Block>,
    fc: Linear,
    binary_weights: bool,
}

/// Gradient of every trainable tensor, stored in a network-shaped container
/// so that [`Gradients::params_mut`] lines up with [`Network::params_mut`].
#[derive(Clone, Debug)]
pub struct Gradients(Network);

impl Gradients {
    pub fn params_mut(&mut self) -> Vec<ParamView<'_>> {
        self.0.params_mut()
    }

    /// `(name, kind, values)` for every trainable tensor.
    pub fn entries(&self) -> Vec<(String, ParamKind, Vec<f64>)> {
        self.0.clone().params_mut().into_iter().map(|p| (p.name, p.kind, p.values.to_vec())).collect()
    }
}

impl Network {
    /// Builds a freshly initialized network. Weights start as real-valued;
    /// call [`Network::set_binary_weights`] to switch to 1-bit weights.
    pub fn new(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let v = spec.variant;
        let binary = v.precision == Precision::Binary;
        let sign = match (binary, v.use_rsign) {
            (false, _) => SignMode::Identity,
            (true, false) => SignMode::Sign,
            (true, true) => SignMode::RSign,
        };
        let act = match (binary, v.use_rprelu) {
            (false, _) => ActMode::Prelu,
            (true, false) => ActMode::FixedPrelu,
            (true, true) => ActMode::RPReLU,
        };
        let stem = &spec.blocks[0];
        let fan_in = stem.in_channels * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let stem_weight =
            FloatTensor::from_fn(&[stem.out_channels, stem.in_channels, 3, 3], |_| rng.gen_range(-bound..bound));
        let mut blocks = Vec::new();
        for b in &spec.blocks[1..spec.blocks.len() - 1] {
            let c = b.in_channels;
            let shortcut3 = if b.stride == 1 { Shortcut::Identity } else { Shortcut::AvgPool };
            if b.stride > 2 {
                return Err(Error::InvalidArgument("block strides above 2 are not supported".into()));
            }
            let conv3 = Unit::new(rng, c, c, 3, b.stride, 1, sign, act, shortcut3);
            match b.kind {
                BlockKind::Normal => {
                    let conv1 = Unit::new(rng, c, c, 1, 1, 1, sign, act, Shortcut::Identity);
                    blocks.push(Block::Normal { conv3, conv1 });
                }
                BlockKind::Reduction => {
                    let pointwise = match (v.precision, v.downsample) {
                        (_, Downsample::ConcatBinary) | (Precision::Real, Downsample::BinaryDirect) => (0..2)
                            .map(|_| Unit::new(rng, c, c, 1, 1, 1, sign, act, Shortcut::Identity))
                            .collect(),
                        (Precision::Binary, Downsample::BinaryDirect) => {
                            vec![Unit::new(rng, c, 2 * c, 1, 1, 1, sign, act, Shortcut::None)]
                        }
                        (_, d @ (Downsample::RealGroup4 | Downsample::RealFull)) => {
                            let real_act = if binary { act } else { ActMode::Prelu };
                            vec![Unit::new(rng, c, 2 * c, 1, 1, d.groups(), SignMode::Identity, real_act, Shortcut::None)]
                        }
                    };
                    blocks.push(Block::Reduction { conv3, pointwise });
                }
                BlockKind::Stem | BlockKind::Classifier => unreachable!("validated spec"),
            }
        }
        let last = spec.blocks.last().expect("validated spec");
        let fc_bound = 1.0 / (last.in_channels as f64).sqrt();
        let fc = Linear::new(
            FloatTensor::from_fn(&[last.out_channels, last.in_channels], |_| rng.gen_range(-fc_bound..fc_bound)),
            vec![0.0; last.out_channels],
        )?;
        Ok(Self {
            spec: spec.clone(),
            stem_weight,
            stem_stride: stem.stride,
            stem_bn: BatchNormParams::new(stem.out_channels),
            blocks,
            fc,
            binary_weights: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn binary_weights(&self) -> bool {
        self.binary_weights
    }

    /// Switches 1-bit convolutions between latent real weights (first
    /// training step) and `scale * sign(w)` (second step and deployment).
    pub fn set_binary_weights(&mut self, on: bool) {
        self.binary_weights = on;
    }

    pub fn is_binary(&self) -> bool {
        self.spec.variant.precision == Precision::Binary
    }

    fn check_input(&self, x: &FloatTensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        let [ec, eh, ew] = self.spec.input_shape;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::ShapeMismatch {
                expected: vec![n, ec, eh, ew],
                found: x.shape().to_vec(),
            });
        }
        Ok(n)
    }

    fn run(
        &mut self,
        x: &FloatTensor,
        training: bool,
        tally: Option<&OpTally>,
    ) -> Result<(FloatTensor, Option<Tape>)> {
        self.check_input(x)?;
        let stem = conv2d(x, &self.stem_weight, self.stem_stride, 1, 1, 0.0, tally)?;
        let (mut h, stem_bn) = batchnorm_forward(&stem, &mut self.stem_bn, training)?;
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (out, t) = b.forward(&h, training, self.binary_weights, tally)?;
            h = out;
            block_tapes.extend(t);
        }
        let pooled = global_avgpool(&h)?;
        let logits = fc_forward_tallied(&pooled, &self.fc, tally)?;
        let tape = training.then(|| Tape {
            input: x.clone(),
            stem_bn,
            blocks: block_tapes,
            features: h,
            pooled,
        });
        Ok((logits, tape))
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<(FloatTensor, Tape)> {
        let (logits, tape) = self.run(x, true, None)?;
        Ok((logits, tape.expect("training pass records a tape")))
    }

    /// Eval-mode forward. 1-bit convolutions run on the XNOR-popcount kernel
    /// once weights are binarized.
    pub fn forward_eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
        self.forward_counted(x, None)
    }

    /// Eval-mode forward that adds every multiply-accumulate to `tally`.
    pub fn forward_counted(&self, x: &FloatTensor, tally: Option<&OpTally>) -> Result<FloatTensor> {
        // eval mode never writes running statistics; the clone keeps `&self`
        let mut net = self.clone();
        net.run(x, false, tally).map(|(l, _)| l)
    }

    pub fn backward(&self, tape: &Tape, upstream: &FloatTensor) -> Result<Gradients> {
        let mut grads = self.zeroed();
        let g = &mut grads.0;
        let fc = fc_backward(&tape.pooled, &self.fc, upstream)?;
        g.fc.weight = fc.weight;
        g.fc.bias = fc.bias;
        let mut gh = global_avgpool_backward(tape.features.shape(), &fc.grad_x)?;
        for ((b, t), gb) in self.blocks.iter().zip(&tape.blocks).zip(g.blocks.iter_mut()).rev() {
            gh = b.backward(t, &gh, self.binary_weights, gb)?;
        }
        let bn = batchnorm_backward(&tape.stem_bn, &self.stem_bn, &gh)?;
        g.stem_bn.gamma = bn.gamma;
        g.stem_bn.beta = bn.beta;
        let (_, gw) = conv2d_backward(&tape.input, &self.stem_weight, &bn.grad_x, self.stem_stride, 1, 1, 0.0, false)?;
        g.stem_weight = gw;
        Ok(grads)
    }

    fn zeroed(&self) -> Gradients {
        let mut z = self.clone();
        for p in z.state_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut z.blocks {
            for u in b.units_mut() {
                u.anchor = None;
            }
        }
        Gradients(z)
    }

    /// Every stored tensor, trainable or not, in a fixed order.
    pub fn state_mut(&mut self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        let shape = self.stem_weight.shape().to_vec();
        out.push(ParamView {
            name: "stem.conv.weight".into(),
            kind: ParamKind::ConvWeight,
            shape,
            values: self.stem_weight.data_mut(),
        });
        let c = self.stem_bn.channels();
        let bn = &mut self.stem_bn;
        out.push(ParamView {
            name: "stem.bn.gamma".into(),
            kind: ParamKind::BnGamma,
            shape: vec![c],
            values: &mut bn.gamma,
        });
        out.push(ParamView {
            name: "stem.bn.beta".into(),
            kind: ParamKind::BnBeta,
            shape: vec![c],
            values: &mut bn.beta,
        });
        out.push(ParamView {
            name: "stem.bn.running_mean".into(),
            kind: ParamKind::RunningMean,
            shape: vec![c],
            values: &mut bn.running_mean,
        });
        out.push(ParamView {
            name: "stem.bn.running_var".into(),
            kind: ParamKind::RunningVar,
            shape: vec![c],
            values: &mut bn.running_var,
        });
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            let names = b.unit_names();
            for (u, name) in b.units_mut().into_iter().zip(names) {
                u.visit(&format!("block{}.{}", bi + 1, name), &mut out);
            }
        }
        let shape = self.fc.weight.shape().to_vec();
        let nb = self.fc.bias.len();
        out.push(ParamView {
            name: "classifier.fc.weight".into(),
            kind: ParamKind::FcWeight,
            shape,
            values: self.fc.weight.data_mut(),
        });
        out.push(ParamView {
            name: "classifier.fc.bias".into(),
            kind: ParamKind::FcBias,
            shape: vec![nb],
            values: &mut self.fc.bias,
        });
        out
    }

    /// Trainable tensors only, in the same order as [`Gradients::params_mut`].
    pub fn params_mut(&mut self) -> Vec<ParamView<'_>> {
        self.state_mut().into_iter().filter(|p| p.kind.is_trainable()).collect()
    }

    /// `(name, kind, shape, values)` copies of every stored tensor.
    pub fn state(&self) -> Vec<(String, ParamKind, Vec<usize>, Vec<f64>)> {
        self.clone()
            .state_mut()
            .into_iter()
            .map(|p| (p.name, p.kind, p.shape, p.values.to_vec()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.clone().params_mut().iter().map(|p| p.values.len()).sum()
    }

    /// Clips latent 1-bit weights to `[-LATENT_WEIGHT_CLIP, LATENT_WEIGHT_CLIP]`.
    pub fn clip_latent_weights(&mut self) {
        for p in self.params_mut() {
            if p.kind == ParamKind::LatentWeight {
                p.values
                    .iter_mut()
                    .for_each(|v| *v = v.clamp(-LATENT_WEIGHT_CLIP, LATENT_WEIGHT_CLIP));
            }
        }
    }

    /// Runs a training-mode pass at the current parameters and freezes every
    /// discrete decision (signs, weight signs, activation branches) there.
    /// Subsequent passes evaluate a smooth surrogate whose gradient at the
    /// anchor equals [`Network::backward`].
    pub fn set_anchor(&mut self, x: &FloatTensor) -> Result<()> {
        self.clear_anchor();
        let saved: Vec<_> = self.state();
        let (_, tape) = self.forward_train(x)?;
        for (b, t) in self.blocks.iter_mut().zip(&tape.blocks) {
            b.record_anchor(t);
        }
        // restore running statistics touched by the recording pass
        for (p, (_, _, _, v)) in self.state_mut().into_iter().zip(saved) {
            p.values.copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn clear_anchor(&mut self) {
        for b in &mut self.blocks {
            for u in b.units_mut() {
                u.anchor = None;
            }
        }
    }

    /// Per-unit learnable activation coefficients, keyed by unit name.
    pub fn coefficients(&self) -> Vec<(String, Vec<(&'static str, Vec<f64>)>)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for (u, name) in b.units().into_iter().zip(b.unit_names()) {
                out.push((
                    format!("block{}.{}", bi + 1, name),
                    u.coefficient_groups().into_iter().map(|(k, v)| (k, v.to_vec())).collect(),
                ));
            }
        }
        out
    }

    /// Eval-mode input of every unit's sign function (the tensors whose
    /// distribution the learnable thresholds reshape), keyed by unit name.
    pub fn unit_inputs(&self, x: &FloatTensor) -> Result<Vec<(String, FloatTensor)>> {
        self.check_input(x)?;
        let mut net = self.clone();
        let stem = conv2d(x, &net.stem_weight, net.stem_stride, 1, 1, 0.0, None)?;
        let (mut h, _) = batchnorm_forward(&stem, &mut net.stem_bn, false)?;
        let mut out = Vec::new();
        let bw = net.binary_weights;
        for (bi, b) in net.blocks.iter_mut().enumerate() {
            let names = b.unit_names();
            match b {
                Block::Normal { conv3, conv1 } => {
                    out.push((format!("block{}.{}", bi + 1, names[0]), h.clone()));
                    let (y, _) = conv3.forward(&h, false, bw, None)?;
                    out.push((format!("block{}.{}", bi + 1, names[1]), y.clone()));
                    h = conv1.forward(&y, false, bw, None)?.0;
                }
                Block::Reduction { conv3, pointwise } => {
                    out.push((format!("block{}.{}", bi + 1, names[0]), h.clone()));
                    let (y, _) = conv3.forward(&h, false, bw, None)?;
                    let mut outs = Vec::new();
                    for (u, name) in pointwise.iter_mut().zip(&names[1..]) {
                        out.push((format!("block{}.{}", bi + 1, name), y.clone()));
                        outs.push(u.forward(&y, false, bw, None)?.0);
                    }
                    h = if outs.len() == 1 { outs.pop().expect("one output") } else { concat_channels(&outs)? };
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network_for, BlockSpec, Scale, Variant};
    use crate::loss::{distributional_loss, distributional_loss_backward};
    use crate::layers::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(variant: Variant) -> NetworkSpec {
        NetworkSpec {
            variant,
            scale: Scale::Desk,
            input_shape: [2, 6, 6],
            num_classes: 3,
            blocks: vec![
                BlockSpec {
                    kind: BlockKind::Stem,
                    in_channels: 2,
                    out_channels: 4,
                    stride: 1,
                },
                BlockSpec {
                    kind: BlockKind::Normal,
                    in_channels: 4,
                    out_channels: 4,
                    stride: 1,
                },
                BlockSpec {
                    kind: BlockKind::Reduction,
                    in_channels: 4,
                    out_channels: 8,
                    stride: 2,
                },
                BlockSpec {
                    kind: BlockKind::Classifier,
                    in_channels: 8,
                    out_channels: 3,
                    stride: 1,
                },
            ],
        }
    }

    fn input(rng: &mut ChaCha8Rng, n: usize) -> FloatTensor {
        FloatTensor::from_fn(&[n, 2, 6, 6], |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn logits_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for tag in Variant::known_tags() {
            let v = Variant::parse(tag).unwrap();
            let mut net = Network::new(&tiny_spec(v), &mut rng).unwrap();
            let x = FloatTensor::zeros(&[3, 2, 6, 6]);
            let (l, _) = net.forward_train(&x).unwrap();
            assert_eq!(l.shape(), &[3, 3]);
            assert!(l.is_finite());
            net.set_binary_weights(true);
            assert!(net.forward_eval(&x).unwrap().is_finite(), "{tag}");
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::new(&tiny_spec(Variant::reactnet_a()), &mut rng).unwrap();
        assert!(net.forward_eval(&FloatTensor::zeros(&[1, 2, 5, 6])).is_err());
    }

    #[test]
    fn identical_inputs_identical_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Network::new(&tiny_spec(Variant::reactnet_a()), &mut rng).unwrap();
        net.set_binary_weights(true);
        let one = input(&mut rng, 1);
        let two = FloatTensor::new(vec![2, 2, 6, 6], [one.data(), one.data()].concat()).unwrap();
        let l = net.forward_eval(&two).unwrap();
        assert_eq!(l.data()[..3], l.data()[3..]);
    }

    #[test]
    fn bit_kernel_eval_matches_float_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = Network::new(&tiny_spec(Variant::reactnet_a()), &mut rng).unwrap();
        net.set_binary_weights(true);
        let x = input(&mut rng, 4);
        let fast = net.forward_eval(&x).unwrap();
        let float = net.clone().run_float_eval(&x).unwrap();
        assert!(fast.max_abs_diff(&float) < 1e-9);
    }

    impl Network {
        fn run_float_eval(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
            let stem = conv2d(x, &self.stem_weight, self.stem_stride, 1, 1, 0.0, None)?;
            let (mut h, _) = batchnorm_forward(&stem, &mut self.stem_bn, false)?;
            let bw = self.binary_weights;
            for b in &mut self.blocks {
                h = match b {
                    Block::Normal { conv3, conv1 } => {
                        let y = float_unit(conv3, &h, bw)?;
                        float_unit(conv1, &y, bw)?
                    }
                    Block::Reduction { conv3, pointwise } => {
                        let y = float_unit(conv3, &h, bw)?;
                        let outs: Vec<_> = pointwise.iter_mut().map(|u| float_unit(u, &y, bw)).collect::<Result<_>>()?;
                        if outs.len() == 1 {
                            outs.into_iter().next().unwrap()
                        } else {
                            concat_channels(&outs)?
                        }
                    }
                };
            }
            fc_forward_tallied(&global_avgpool(&h)?, &self.fc, None)
        }
    }

    fn float_unit(u: &mut Unit, x: &FloatTensor, bw: bool) -> Result<FloatTensor> {
        let signs = u.binarize_input(x)?;
        let w = u.effective_weight(bw)?;
        let conv = conv2d(&signs, &w, u.stride, u.kernel() / 2, u.groups, u.pad_value(), None)?;
        let (mut pre, _) = batchnorm_forward(&conv, &mut u.bn, false)?;
        match u.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => pre.add_assign(x)?,
            Shortcut::AvgPool => pre.add_assign(&avgpool2x2(x)?)?,
        }
        u.activate(&pre)
    }

    #[test]
    fn react_at_init_matches_baseline_bitwise() {
        {
            let mut r1 = ChaCha8Rng::seed_from_u64(11);
            let mut r2 = ChaCha8Rng::seed_from_u64(11);
            let mut base = Network::new(&tiny_spec(Variant::baseline()), &mut r1).unwrap();
            let mut react = Network::new(&tiny_spec(Variant::reactnet_a()), &mut r2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let x = input(&mut rng, 3);
            let (a, _) = base.forward_train(&x).unwrap();
            let (b, _) = react.forward_train(&x).unwrap();
            assert_eq!(a, b);
            base.set_binary_weights(true);
            react.set_binary_weights(true);
            assert_eq!(base.forward_eval(&x).unwrap(), react.forward_eval(&x).unwrap());
        }
    }

    #[test]
    fn react_parameter_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for scale in [Scale::Desk, Scale::ImageNet] {
            let spec_b = build_network_for(Variant::baseline(), scale, [3, 32, 32], 10);
            let spec_r = build_network_for(Variant::reactnet_a(), scale, [3, 32, 32], 10);
            if scale == Scale::ImageNet {
                // shapes only; skip allocating the large network twice
                assert_eq!(spec_r.react_parameter_count(), 4 * spec_r.activation_sites().iter().map(|s| s.act_channels).sum::<usize>());
                continue;
            }
            let b = Network::new(&spec_b, &mut rng).unwrap().parameter_count();
            let r = Network::new(&spec_r, &mut rng).unwrap().parameter_count();
            assert_eq!(r - b, spec_r.react_parameter_count());
        }
    }

    #[test]
    fn zero_weights_pass_shortcut_through_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut net = Network::new(&tiny_spec(Variant::reactnet_a()), &mut rng).unwrap();
        let Block::Normal { conv3, .. } = &mut net.blocks[0] else { panic!() };
        conv3.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        conv3.rprelu.gamma = vec![0.1, -0.2, 0.0, 0.3];
        let x = FloatTensor::from_fn(&[2, 4, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = conv3.forward(&x, true, false, None).unwrap();
        assert_eq!(y, rprelu_forward(&x, &conv3.rprelu).unwrap());
    }

    #[test]
    fn concat_halves_match_for_identical_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut net = Network::new(&tiny_spec(Variant::reactnet_a()), &mut rng).unwrap();
        let Block::Reduction { pointwise, .. } = &mut net.blocks[1] else { panic!() };
        for u in pointwise.iter_mut() {
            u.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(&mut rng, 2);
        let (l, tape) = net.forward_train(&x).unwrap();
        assert!(l.is_finite());
        let halves = split_channels(&tape.features, 2).unwrap();
        assert_eq!(halves[0], halves[1]);
        assert_eq!(tape.features.shape(), &[2, 8, 3, 3]);
    }

    #[test]
    fn threshold_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut net = Network::new(&tiny_spec(Variant::reactnet_a()), &mut rng).unwrap();
        let Block::Normal { conv3, .. } = &mut net.blocks[0] else { panic!() };
        conv3.alpha.alpha = vec![0.1, -0.3, 0.2, 0.0];
        let x = FloatTensor::from_fn(&[2, 4, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let bits = rsign_forward(&x, &conv3.alpha).unwrap();
        let shift = 0.75;
        let mut x2 = x.clone();
        for (i, v) in x2.data_mut().iter_mut().enumerate() {
            if (i / 36) % 4 == 1 {
                *v += shift;
            }
        }
        let mut p2 = conv3.alpha.clone();
        p2.alpha[1] += shift;
        let params = BinaryConvParams::new(conv3.weight.clone()).unwrap();
        let a = crate::bitkernel::binary_conv2d(&bits, &params, 1, 1).unwrap();
        let b = crate::bitkernel::binary_conv2d(&rsign_forward(&x2, &p2).unwrap(), &params, 1, 1).unwrap();
        assert_eq!(a, b);
    }

    fn surrogate_loss(net: &mut Network, x: &FloatTensor, t: &FloatTensor) -> f64 {
        let (l, _) = net.forward_train(x).unwrap();
        distributional_loss(&l, t).unwrap()
    }

    #[test]
    fn whole_network_gradient_matches_surrogate_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for tag in ["reactnet-a", "baseline", "reactnet-b", "real"] {
            for binary_weights in [false, true] {
                let mut net = Network::new(&tiny_spec(Variant::parse(tag).unwrap()), &mut rng).unwrap();
                net.set_binary_weights(binary_weights);
                let x = input(&mut rng, 3);
                let t = softmax(&FloatTensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0))).unwrap();
                net.set_anchor(&x).unwrap();
                let (l, tape) = net.forward_train(&x).unwrap();
                let up = distributional_loss_backward(&l, &t).unwrap();
                let grads = net.backward(&tape, &up).unwrap().entries();
                let h = 1e-6;
                for (pi, (name, _, g)) in grads.iter().enumerate() {
                    for j in (0..g.len()).step_by(g.len().div_ceil(3)) {
                        let mut plus = net.clone();
                        plus.params_mut()[pi].values[j] += h;
                        let mut minus = net.clone();
                        minus.params_mut()[pi].values[j] -= h;
                        let fd = (surrogate_loss(&mut plus, &x, &t) - surrogate_loss(&mut minus, &x, &t)) / (2.0 * h);
                        let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                        assert!(err <= 1e-4, "{tag} bw={binary_weights} {name}[{j}]: fd {fd} vs {}", g[j]);
                    }
                }
            }
        }
    }
}
