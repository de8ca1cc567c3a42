//! Declarative network description shared by the executor and the OPs
//! counter.

use std::fmt::Write as _;

use crate::bitkernel::conv_out_size;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// 1-bit activations and (in the second training step) 1-bit weights.
    Binary,
    /// Real-valued counterpart used as teacher and reference.
    Real,
}

/// How a reduction block doubles its channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// Two parallel 1-bit 1x1 convs on the same input, each with an identity
    /// shortcut, concatenated.
    ConcatBinary,
    /// One 1-bit 1x1 conv from C to 2C with no shortcut.
    BinaryDirect,
    /// Real-valued 1x1 conv from C to 2C with 4 groups.
    RealGroup4,
    /// Real-valued 1x1 conv from C to 2C.
    RealFull,
}

impl Downsample {
    pub fn name(self) -> &'static str {
        match self {
            Downsample::ConcatBinary => "concat-binary",
            Downsample::BinaryDirect => "binary-direct",
            Downsample::RealGroup4 => "real-group4",
            Downsample::RealFull => "real-full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat-binary" => Ok(Downsample::ConcatBinary),
            "binary-direct" => Ok(Downsample::BinaryDirect),
            "real-group4" => Ok(Downsample::RealGroup4),
            "real-full" => Ok(Downsample::RealFull),
            other => Err(Error::Format(format!("unknown downsample flavor `{other}`"))),
        }
    }

    pub fn groups(self) -> usize {
        match self {
            Downsample::RealGroup4 => 4,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub precision: Precision,
    pub use_rsign: bool,
    pub use_rprelu: bool,
    pub downsample: Downsample,
}

const NAMED_VARIANTS: &[&str] = &[
    "baseline",
    "baseline-direct",
    "rsign-only",
    "rprelu-only",
    "reactnet-a",
    "reactnet-direct",
    "reactnet-b",
    "reactnet-c",
    "real",
];

impl Variant {
    pub const fn binary(use_rsign: bool, use_rprelu: bool, downsample: Downsample) -> Self {
        Self {
            precision: Precision::Binary,
            use_rsign,
            use_rprelu,
            downsample,
        }
    }

    /// Sign + fixed-slope PReLU, concatenated reduction blocks.
    pub const fn baseline() -> Self {
        Self::binary(false, false, Downsample::ConcatBinary)
    }

    pub const fn reactnet_a() -> Self {
        Self::binary(true, true, Downsample::ConcatBinary)
    }

    pub const fn reactnet_b() -> Self {
        Self::binary(true, true, Downsample::RealGroup4)
    }

    pub const fn reactnet_c() -> Self {
        Self::binary(true, true, Downsample::RealFull)
    }

    /// Real-valued network with the same topology as the baseline.
    pub const fn real() -> Self {
        Self {
            precision: Precision::Real,
            use_rsign: false,
            use_rprelu: false,
            downsample: Downsample::ConcatBinary,
        }
    }

    pub fn known_tags() -> &'static [&'static str] {
        NAMED_VARIANTS
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "baseline" => Self::baseline(),
            "baseline-direct" => Self::binary(false, false, Downsample::BinaryDirect),
            "rsign-only" => Self::binary(true, false, Downsample::ConcatBinary),
            "rprelu-only" => Self::binary(false, true, Downsample::ConcatBinary),
            "reactnet-a" | "reactnet" => Self::reactnet_a(),
            "reactnet-direct" => Self::binary(true, true, Downsample::BinaryDirect),
            "reactnet-b" => Self::reactnet_b(),
            "reactnet-c" => Self::reactnet_c(),
            "real" | "teacher" => Self::real(),
            other => return Err(Error::UnknownVariant(other.to_string())),
        })
    }

    pub fn tag(&self) -> String {
        NAMED_VARIANTS
            .iter()
            .find(|t| Self::parse(t).ok().as_ref() == Some(self))
            .map(|t| t.to_string())
            .unwrap_or_else(|| {
                format!(
                    "custom(rsign={},rprelu={},downsample={})",
                    self.use_rsign,
                    self.use_rprelu,
                    self.downsample.name()
                )
            })
    }

    /// The real-valued network with this variant's topology.
    pub fn real_counterpart(&self) -> Self {
        Self {
            precision: Precision::Real,
            use_rsign: false,
            use_rprelu: false,
            downsample: self.downsample,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Five-block network for 28x28 / 32x32 inputs.
    Desk,
    /// MobileNetV1-shaped 13-block network for 224x224 inputs.
    ImageNet,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "imagenet" => Ok(Scale::ImageNet),
            other => Err(Error::Format(format!("unknown scale `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Stem,
    Normal,
    Reduction,
    Classifier,
}

impl BlockKind {
    fn name(self) -> &'static str {
        match self {
            BlockKind::Stem => "stem",
            BlockKind::Normal => "normal",
            BlockKind::Reduction => "reduction",
            BlockKind::Classifier => "classifier",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stem" => Ok(BlockKind::Stem),
            "normal" => Ok(BlockKind::Normal),
            "reduction" => Ok(BlockKind::Reduction),
            "classifier" => Ok(BlockKind::Classifier),
            other => Err(Error::Format(format!("unknown block kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Operator class of a counted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    BinaryConv,
    RealConv,
    FullyConnected,
}

impl LayerOp {
    pub fn name(self) -> &'static str {
        match self {
            LayerOp::BinaryConv => "binary-conv",
            LayerOp::RealConv => "real-conv",
            LayerOp::FullyConnected => "fc",
        }
    }
}

/// One multiply-accumulate layer in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub id: String,
    pub op: LayerOp,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerDesc {
    /// Multiply-accumulates per input image.
    pub fn macs(&self) -> u64 {
        (self.in_channels / self.groups * self.kernel * self.kernel * self.out_channels * self.out_h * self.out_w)
            as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub scale: Scale,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

const IMAGENET_BODY: &[(usize, usize, usize)] = &[
    (32, 64, 1),
    (64, 128, 2),
    (128, 128, 1),
    (128, 256, 2),
    (256, 256, 1),
    (256, 512, 2),
    (512, 512, 1),
    (512, 512, 1),
    (512, 512, 1),
    (512, 512, 1),
    (512, 512, 1),
    (512, 1024, 2),
    (1024, 1024, 1),
];

const DESK_BODY: &[(usize, usize, usize)] = &[(16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1)];

/// Network at its default input size: 3x224x224 / 1000 classes for imagenet
/// scale, 3x32x32 / 10 classes for desk scale.
pub fn build_network(variant: Variant, scale: Scale) -> NetworkSpec {
    let (input, classes) = match scale {
        Scale::ImageNet => ([3, 224, 224], 1000),
        Scale::Desk => ([3, 32, 32], 10),
    };
    build_network_for(variant, scale, input, classes)
}

pub fn build_network_for(variant: Variant, scale: Scale, input_shape: [usize; 3], num_classes: usize) -> NetworkSpec {
    let (stem_out, stem_stride, body) = match scale {
        Scale::ImageNet => (32, 2, IMAGENET_BODY),
        Scale::Desk => (16, 1, DESK_BODY),
    };
    let mut blocks = vec![BlockSpec {
        kind: BlockKind::Stem,
        in_channels: input_shape[0],
        out_channels: stem_out,
        stride: stem_stride,
    }];
    blocks.extend(body.iter().map(|&(cin, cout, stride)| BlockSpec {
        kind: if cin == cout { BlockKind::Normal } else { BlockKind::Reduction },
        in_channels: cin,
        out_channels: cout,
        stride,
    }));
    let last = body.last().map_or(stem_out, |b| b.1);
    blocks.push(BlockSpec {
        kind: BlockKind::Classifier,
        in_channels: last,
        out_channels: num_classes,
        stride: 1,
    });
    NetworkSpec {
        variant,
        scale,
        input_shape,
        num_classes,
        blocks,
    }
}

impl NetworkSpec {
    /// Checks that block shapes chain and every block is well formed.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 || self.blocks[0].kind != BlockKind::Stem {
            return Err(Error::Format("network must start with a stem".into()));
        }
        if self.blocks.last().map(|b| b.kind) != Some(BlockKind::Classifier) {
            return Err(Error::Format("network must end with a classifier".into()));
        }
        if self.blocks[0].in_channels != self.input_shape[0] {
            return Err(Error::Format("stem input channels differ from the input shape".into()));
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Format(format!(
                    "block {} outputs {} channels but block {} expects {}",
                    i,
                    pair[0].out_channels,
                    i + 1,
                    pair[1].in_channels
                )));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let ok = match b.kind {
                BlockKind::Normal => b.in_channels == b.out_channels,
                BlockKind::Reduction => b.out_channels == 2 * b.in_channels,
                BlockKind::Classifier => b.out_channels == self.num_classes,
                BlockKind::Stem => true,
            };
            if !ok || b.stride == 0 || b.in_channels == 0 {
                return Err(Error::Format(format!("block {i} is malformed: {b:?}")));
            }
            if (i == 0) != (b.kind == BlockKind::Stem) {
                return Err(Error::Format(format!("stem may only appear first (block {i})")));
            }
        }
        if self.variant.downsample == Downsample::RealGroup4
            && self
                .blocks
                .iter()
                .any(|b| b.kind == BlockKind::Reduction && b.in_channels % 4 != 0)
        {
            return Err(Error::Format("4-group downsampling needs channels divisible by 4".into()));
        }
        self.layers().map(|_| ())
    }

    fn conv_op(&self) -> LayerOp {
        match self.variant.precision {
            Precision::Binary => LayerOp::BinaryConv,
            Precision::Real => LayerOp::RealConv,
        }
    }

    /// Multiply-accumulate layers in execution order with concrete shapes.
    pub fn layers(&self) -> Result<Vec<LayerDesc>> {
        let [_, mut h, mut w] = self.input_shape;
        let mut out = Vec::new();
        let conv_op = self.conv_op();
        for (bi, b) in self.blocks.iter().enumerate() {
            let mut push = |id: String, op, cin, cout, k: usize, stride, groups, h: usize, w: usize| -> Result<(usize, usize)> {
                let pad = k / 2;
                let oh = conv_out_size(h, k, stride, pad)?;
                let ow = conv_out_size(w, k, stride, pad)?;
                out.push(LayerDesc {
                    id,
                    op,
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                    stride,
                    groups,
                    out_h: oh,
                    out_w: ow,
                });
                Ok((oh, ow))
            };
            let c = b.in_channels;
            match b.kind {
                BlockKind::Stem => {
                    (h, w) = push("stem.conv".into(), LayerOp::RealConv, c, b.out_channels, 3, b.stride, 1, h, w)?;
                }
                BlockKind::Normal => {
                    (h, w) = push(format!("block{bi}.conv3x3"), conv_op, c, c, 3, b.stride, 1, h, w)?;
                    push(format!("block{bi}.conv1x1"), conv_op, c, c, 1, 1, 1, h, w)?;
                }
                BlockKind::Reduction => {
                    (h, w) = push(format!("block{bi}.conv3x3"), conv_op, c, c, 3, b.stride, 1, h, w)?;
                    match (self.variant.precision, self.variant.downsample) {
                        (_, Downsample::ConcatBinary) | (Precision::Real, Downsample::BinaryDirect) => {
                            push(format!("block{bi}.conv1x1.0"), conv_op, c, c, 1, 1, 1, h, w)?;
                            push(format!("block{bi}.conv1x1.1"), conv_op, c, c, 1, 1, 1, h, w)?;
                        }
                        (Precision::Binary, Downsample::BinaryDirect) => {
                            push(format!("block{bi}.conv1x1"), LayerOp::BinaryConv, c, 2 * c, 1, 1, 1, h, w)?;
                        }
                        (_, d @ (Downsample::RealGroup4 | Downsample::RealFull)) => {
                            push(format!("block{bi}.conv1x1"), LayerOp::RealConv, c, 2 * c, 1, 1, d.groups(), h, w)?;
                        }
                    }
                }
                BlockKind::Classifier => out.push(LayerDesc {
                    id: "classifier.fc".into(),
                    op: LayerOp::FullyConnected,
                    in_channels: c,
                    out_channels: b.out_channels,
                    kernel: 1,
                    stride: 1,
                    groups: 1,
                    out_h: 1,
                    out_w: 1,
                }),
            }
        }
        Ok(out)
    }

    /// Every 1-bit convolution must have equal input and output channels.
    /// Returns the ids of offending layers (only the direct-downsample
    /// ablation produces any).
    pub fn unequal_binary_convs(&self) -> Result<Vec<String>> {
        Ok(self
            .layers()?
            .into_iter()
            .filter(|l| l.op == LayerOp::BinaryConv && l.in_channels != l.out_channels)
            .map(|l| l.id)
            .collect())
    }

    /// Channel counts of every (sign, activation) pair in the body:
    /// `(sign_channels, activation_channels, sign_is_present)`.
    pub fn activation_sites(&self) -> Vec<ActivationSite> {
        let binary = self.variant.precision == Precision::Binary;
        let mut sites = Vec::new();
        for b in &self.blocks {
            let c = b.in_channels;
            match b.kind {
                BlockKind::Normal => {
                    sites.push(ActivationSite::paired(c, binary));
                    sites.push(ActivationSite::paired(c, binary));
                }
                BlockKind::Reduction => {
                    sites.push(ActivationSite::paired(c, binary));
                    match (self.variant.precision, self.variant.downsample) {
                        (_, Downsample::ConcatBinary) | (Precision::Real, Downsample::BinaryDirect) => {
                            sites.push(ActivationSite::paired(c, binary));
                            sites.push(ActivationSite::paired(c, binary));
                        }
                        (Precision::Binary, Downsample::BinaryDirect) => sites.push(ActivationSite {
                            sign_channels: c,
                            act_channels: 2 * c,
                        }),
                        (_, Downsample::RealGroup4 | Downsample::RealFull) => sites.push(ActivationSite {
                            sign_channels: 0,
                            act_channels: 2 * c,
                        }),
                    }
                }
                BlockKind::Stem | BlockKind::Classifier => {}
            }
        }
        sites
    }

    /// Learnable coefficients added by RSign/RPReLU over Sign/fixed PReLU.
    pub fn react_parameter_count(&self) -> usize {
        let rsign = usize::from(self.variant.use_rsign && self.variant.precision == Precision::Binary);
        let rprelu = usize::from(self.variant.use_rprelu && self.variant.precision == Precision::Binary);
        self.activation_sites()
            .iter()
            .map(|s| rsign * s.sign_channels + 3 * rprelu * s.act_channels)
            .sum()
    }

    /// Flat `key=value` text, one block per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = &self.variant;
        writeln!(s, "format=reactnet-spec/1").unwrap();
        writeln!(s, "variant={}", v.tag()).unwrap();
        writeln!(
            s,
            "precision={}",
            match v.precision {
                Precision::Binary => "binary",
                Precision::Real => "real",
            }
        )
        .unwrap();
        writeln!(s, "rsign={}", v.use_rsign).unwrap();
        writeln!(s, "rprelu={}", v.use_rprelu).unwrap();
        writeln!(s, "downsample={}", v.downsample.name()).unwrap();
        writeln!(
            s,
            "scale={}",
            match self.scale {
                Scale::Desk => "desk",
                Scale::ImageNet => "imagenet",
            }
        )
        .unwrap();
        let [c, h, w] = self.input_shape;
        writeln!(s, "input={c}x{h}x{w}").unwrap();
        writeln!(s, "classes={}", self.num_classes).unwrap();
        for (i, b) in self.blocks.iter().enumerate() {
            writeln!(
                s,
                "block.{i}={} in={} out={} stride={}",
                b.kind.name(),
                b.in_channels,
                b.out_channels,
                b.stride
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        let mut blocks: Vec<(usize, BlockSpec)> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key=value, got `{line}`")))?;
            if let Some(idx) = k.strip_prefix("block.") {
                let idx: usize = idx.parse().map_err(|_| Error::Format(format!("bad block index `{k}`")))?;
                blocks.push((idx, parse_block(v)?));
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("missing key `{k}`")));
        if get("format")? != "reactnet-spec/1" {
            return Err(Error::Format(format!("unsupported spec format `{}`", get("format")?)));
        }
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("`{k}` must be true or false")))
        };
        let precision = match get("precision")?.as_str() {
            "binary" => Precision::Binary,
            "real" => Precision::Real,
            other => return Err(Error::Format(format!("unknown precision `{other}`"))),
        };
        let variant = Variant {
            precision,
            use_rsign: flag("rsign")?,
            use_rprelu: flag("rprelu")?,
            downsample: Downsample::parse(get("downsample")?)?,
        };
        let dims: Vec<usize> = get("input")?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad input shape `{d}`"))))
            .collect::<Result<_>>()?;
        let input_shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Format("input shape must be CxHxW".into()))?;
        let num_classes = get("classes")?
            .parse()
            .map_err(|_| Error::Format("bad class count".into()))?;
        blocks.sort_by_key(|(i, _)| *i);
        if blocks.iter().enumerate().any(|(i, (j, _))| i != *j) {
            return Err(Error::Format("block indices must be contiguous from 0".into()));
        }
        let spec = NetworkSpec {
            variant,
            scale: Scale::parse(get("scale")?)?,
            input_shape,
            num_classes,
            blocks: blocks.into_iter().map(|(_, b)| b).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_block(v: &str) -> Result<BlockSpec> {
    let mut parts = v.split_whitespace();
    let kind = BlockKind::parse(parts.next().unwrap_or(""))?;
    let (mut cin, mut cout, mut stride) = (None, None, None);
    for p in parts {
        let (k, val) = p
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad block field `{p}`")))?;
        let n: usize = val.parse().map_err(|_| Error::Format(format!("bad number in `{p}`")))?;
        match k {
            "in" => cin = Some(n),
            "out" => cout = Some(n),
            "stride" => stride = Some(n),
            _ => return Err(Error::Format(format!("unknown block field `{k}`"))),
        }
    }
    let missing = || Error::Format(format!("incomplete block `{v}`"));
    Ok(BlockSpec {
        kind,
        in_channels: cin.ok_or_else(missing)?,
        out_channels: cout.ok_or_else(missing)?,
        stride: stride.ok_or_else(missing)?,
    })
}

/// Channels seen by the sign function and by the trailing activation of one
/// conv unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationSite {
    pub sign_channels: usize,
    pub act_channels: usize,
}

impl ActivationSite {
    fn paired(c: usize, binary: bool) -> Self {
        Self {
            sign_channels: if binary { c } else { 0 },
            act_channels: c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imagenet_scale_has_thirteen_body_blocks() {
        let s = build_network(Variant::reactnet_a(), Scale::ImageNet);
        assert_eq!(s.blocks.len(), 15);
        s.validate().unwrap();
        let layers = s.layers().unwrap();
        let last_conv = layers.iter().rev().find(|l| l.op == LayerOp::BinaryConv).unwrap();
        assert_eq!((last_conv.out_h, last_conv.out_w), (7, 7));
    }

    #[test]
    fn desk_scale_shapes() {
        let s = build_network_for(Variant::baseline(), Scale::Desk, [1, 28, 28], 10);
        s.validate().unwrap();
        let l = s.layers().unwrap();
        assert_eq!(l.first().unwrap().out_h, 28);
        let last = &l[l.len() - 2];
        assert_eq!((last.out_channels, last.out_h), (64, 7));
    }

    #[test]
    fn equal_channel_invariant_holds_except_direct_ablation() {
        for tag in Variant::known_tags() {
            let v = Variant::parse(tag).unwrap();
            for scale in [Scale::Desk, Scale::ImageNet] {
                let bad = build_network(v, scale).unequal_binary_convs().unwrap();
                let direct = v.downsample == Downsample::BinaryDirect && v.precision == Precision::Binary;
                assert_eq!(bad.is_empty(), !direct, "{tag}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        for tag in Variant::known_tags() {
            let s = build_network_for(Variant::parse(tag).unwrap(), Scale::Desk, [1, 28, 28], 10);
            let back = NetworkSpec::from_text(&s.to_text()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn from_text_rejects_broken_chain() {
        let s = build_network(Variant::baseline(), Scale::Desk);
        let text = s.to_text().replace("block.2=reduction in=16 out=32", "block.2=reduction in=8 out=16");
        assert!(NetworkSpec::from_text(&text).is_err());
    }

    #[test]
    fn unknown_variant_tag() {
        assert!(matches!(Variant::parse("reactnet-z"), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn react_overhead_is_four_per_channel() {
        let s = build_network(Variant::reactnet_a(), Scale::ImageNet);
        let total: usize = s.activation_sites().iter().map(|a| 4 * a.act_channels).sum();
        assert_eq!(s.react_parameter_count(), total);
        assert_eq!(build_network(Variant::baseline(), Scale::ImageNet).react_parameter_count(), 0);
    }
}
