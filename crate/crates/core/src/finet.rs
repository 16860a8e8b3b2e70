//! Finet: ShuffleNetV2-scale networks whose pointwise convolutions use FBN.
//!
//! Layout (ImageNet form, 224×224 input):
//!
//! ```text
//! conv1 3×3/2 → 24, BN, ReLU
//! maxpool 3×3/2
//! stage2  1 stride-2 block + 3 stride-1 blocks
//! stage3  1 + 7
//! stage4  1 + 3
//! conv5 1×1 → 1024, BN, ReLU
//! global pool → dropout → fc1 1024→1024, ReLU → dropout → fc2 1024→classes
//! ```
//!
//! The CIFAR form runs conv1 at stride 1 and drops the max pool.

use std::fmt;
use std::str::FromStr;

use crate::convnet::{
    BatchNorm, Conv2d, ConvParams, Dropout, FbnConvLayer, GlobalAvgPool, Linear, MaxPool, Relu, SqueezeExcite,
    DEFAULT_SE_HIDDEN,
};
use crate::error::{Error, Result};
use crate::fusion::fuse_model;
use crate::graph::{Branches, ChannelShuffle, NetMeta, Network, Node, Seq};
use crate::layer::Layer;
use crate::norm::{GroupSpec, Mode, NormState, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::{Element, Shape};

pub const STEM_CHANNELS: usize = 24;
pub const HEAD_CHANNELS: usize = 1024;
pub const FC_HIDDEN: usize = 1024;
pub const STAGE_REPEATS: [usize; 3] = [4, 8, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Small,
    Large,
}

impl Variant {
    pub fn stage_channels(self) -> [usize; 3] {
        match self {
            Variant::Small => [30, 60, 120],
            Variant::Large => [100, 200, 400],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Small => "small",
            Variant::Large => "large",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Variant::Small),
            "large" => Ok(Variant::Large),
            _ => Err(Error::config(format!("unknown variant {s:?} (expected small or large)"))),
        }
    }
}

/// Internal wiring of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockStyle {
    /// Single path `1×1 FBN → 3×3 depthwise → 1×1 FBN`, identity added at
    /// stride 1, no identity at stride 2.
    #[default]
    Residual,
    /// Channel split / two branches / concat / shuffle, as in ShuffleNetV2.
    ShuffleSplit,
}

impl fmt::Display for BlockStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockStyle::Residual => "residual",
            BlockStyle::ShuffleSplit => "shuffle-split",
        })
    }
}

impl FromStr for BlockStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(BlockStyle::Residual),
            "shuffle-split" | "shuffle_split" => Ok(BlockStyle::ShuffleSplit),
            _ => Err(Error::config(format!("unknown block style {s:?}"))),
        }
    }
}

/// Normalization hyper-parameters shared by every BN/FBN in a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormHyper {
    pub affine: bool,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for NormHyper {
    fn default() -> Self {
        NormHyper { affine: true, epsilon: DEFAULT_EPSILON, momentum: DEFAULT_MOMENTUM }
    }
}

impl NormHyper {
    fn state<T: Element>(&self, channels: usize) -> NormState<T> {
        NormState::new(channels, self.affine).with_hyper(self.epsilon, self.momentum)
    }

    fn fbn<T: Element>(&self, c_in: usize, c_out: usize, spec: GroupSpec, rng: &mut Rng) -> Result<FbnConvLayer<T>> {
        let mut layer = FbnConvLayer::init(c_in, c_out, 1, 1, 0, spec, self.affine, rng)?;
        layer.norm.epsilon = self.epsilon;
        layer.norm.momentum = self.momentum;
        Ok(layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub group_spec: GroupSpec,
    pub use_se: bool,
    pub se_hidden: usize,
    pub style: BlockStyle,
    pub norm: NormHyper,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, group_spec: GroupSpec) -> Self {
        BlockConfig {
            in_channels,
            out_channels,
            stride,
            group_spec,
            use_se: false,
            se_hidden: DEFAULT_SE_HIDDEN,
            style: BlockStyle::default(),
            norm: NormHyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.stride == 1 && self.in_channels != self.out_channels {
            return Err(Error::config(format!(
                "stride-1 block must keep its width ({} -> {})",
                self.in_channels, self.out_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("block widths must be positive"));
        }
        if self.style == BlockStyle::ShuffleSplit && self.out_channels % 2 != 0 {
            return Err(Error::config(format!("shuffle-split block needs an even width, got {}", self.out_channels)));
        }
        Ok(())
    }
}

fn depthwise<T: Element>(c: usize, stride: usize, rng: &mut Rng) -> Result<Node<T>> {
    Ok(Node::Conv(Conv2d::new(ConvParams::init(c, c, 3, stride, 1, c, rng)?)))
}

/// `1×1 FBN + ReLU → 3×3 depthwise + BN → 1×1 FBN + ReLU (→ SE)`.
fn transform<T: Element>(cfg: &BlockConfig, c_in: usize, c: usize, rng: &mut Rng) -> Result<Seq<T>> {
    let mut s = Seq::default();
    s.push("pw1", Node::FbnConv(cfg.norm.fbn(c_in, c, cfg.group_spec, rng)?));
    s.push("relu1", Node::Relu(Relu::new()));
    s.push("dw", depthwise(c, cfg.stride, rng)?);
    s.push("dw_bn", Node::BatchNorm(BatchNorm::new(cfg.norm.state(c))));
    s.push("pw2", Node::FbnConv(cfg.norm.fbn(c, c, cfg.group_spec, rng)?));
    s.push("relu2", Node::Relu(Relu::new()));
    if cfg.use_se {
        s.push("se", Node::SqueezeExcite(SqueezeExcite::init(c, cfg.se_hidden, rng)?));
    }
    Ok(s)
}

/// Builds one block as a single graph node.
pub fn build_block<T: Element>(cfg: &BlockConfig, rng: &mut Rng) -> Result<Node<T>> {
    cfg.validate()?;
    match cfg.style {
        BlockStyle::Residual => {
            let body = transform(cfg, cfg.in_channels, cfg.out_channels, rng)?;
            Ok(if cfg.stride == 1 { Node::Residual(body) } else { Node::Seq(body) })
        }
        BlockStyle::ShuffleSplit => {
            let half = cfg.out_channels / 2;
            let branches = if cfg.stride == 1 {
                Branches::new(true, Seq::default(), transform(cfg, half, half, rng)?)
            } else {
                let mut left = Seq::default();
                left.push("dw", depthwise(cfg.in_channels, 2, rng)?);
                left.push("dw_bn", Node::BatchNorm(BatchNorm::new(cfg.norm.state(cfg.in_channels))));
                left.push("pw", Node::FbnConv(cfg.norm.fbn(cfg.in_channels, half, cfg.group_spec, rng)?));
                left.push("relu", Node::Relu(Relu::new()));
                Branches::new(false, left, transform(cfg, cfg.in_channels, half, rng)?)
            };
            let mut s = Seq::default();
            s.push("branches", Node::Branches(branches));
            s.push("shuffle", Node::ChannelShuffle(ChannelShuffle { groups: 2 }));
            Ok(Node::Seq(s))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetConfig {
    pub variant: Variant,
    pub group_spec: GroupSpec,
    pub use_se: bool,
    /// Conv1 at stride 1 and no max pool, for 32×32 inputs.
    pub cifar_adapted: bool,
    pub classes: usize,
    /// Square input side; 224 for the ImageNet form, 32 for CIFAR.
    pub input_size: usize,
    pub style: BlockStyle,
    pub se_hidden: usize,
    pub dropout: f64,
    pub norm: NormHyper,
    pub seed: u64,
}

impl FinetConfig {
    pub fn imagenet(variant: Variant, group_spec: GroupSpec, use_se: bool) -> Self {
        FinetConfig {
            variant,
            group_spec,
            use_se,
            cifar_adapted: false,
            classes: 1000,
            input_size: 224,
            style: BlockStyle::default(),
            se_hidden: DEFAULT_SE_HIDDEN,
            dropout: 0.2,
            norm: NormHyper::default(),
            seed: 0,
        }
    }

    pub fn cifar(variant: Variant, group_spec: GroupSpec, use_se: bool, classes: usize) -> Self {
        FinetConfig { cifar_adapted: true, classes, input_size: 32, ..FinetConfig::imagenet(variant, group_spec, use_se) }
    }

    pub fn name(&self) -> String {
        format!("finet-{}", self.variant)
    }
}

/// Builds a Finet in training mode with seeded initialization.
pub fn build_finet<T: Element>(cfg: &FinetConfig) -> Result<Network<T>> {
    if cfg.classes == 0 {
        return Err(Error::config("classes must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::config(format!("dropout rate {} outside [0, 1)", cfg.dropout)));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut body = Seq::default();
    let stem_stride = if cfg.cifar_adapted { 1 } else { 2 };
    body.push("conv1", Node::Conv(Conv2d::new(ConvParams::init(3, STEM_CHANNELS, 3, stem_stride, 1, 1, &mut rng)?)));
    body.push("bn1", Node::BatchNorm(BatchNorm::new(cfg.norm.state(STEM_CHANNELS))));
    body.push("relu1", Node::Relu(Relu::new()));
    if !cfg.cifar_adapted {
        body.push("maxpool", Node::MaxPool(MaxPool::new(3, 2, 1)));
    }
    let mut c_in = STEM_CHANNELS;
    for (i, (&c, &repeats)) in cfg.variant.stage_channels().iter().zip(&STAGE_REPEATS).enumerate() {
        let mut stage = Seq::default();
        for b in 0..repeats {
            let stride = if b == 0 { 2 } else { 1 };
            let block = BlockConfig {
                use_se: cfg.use_se,
                se_hidden: cfg.se_hidden,
                style: cfg.style,
                norm: cfg.norm,
                ..BlockConfig::new(c_in, c, stride, cfg.group_spec)
            };
            stage.push(b.to_string(), build_block(&block, &mut rng)?);
            c_in = c;
        }
        body.push(format!("stage{}", i + 2), Node::Seq(stage));
    }
    body.push("conv5", Node::Conv(Conv2d::new(ConvParams::init(c_in, HEAD_CHANNELS, 1, 1, 0, 1, &mut rng)?)));
    body.push("bn5", Node::BatchNorm(BatchNorm::new(cfg.norm.state(HEAD_CHANNELS))));
    body.push("relu5", Node::Relu(Relu::new()));
    body.push("pool", Node::GlobalAvgPool(GlobalAvgPool::new()));
    body.push("dropout1", Node::Dropout(Dropout::new(cfg.dropout, rng.fork(0xD401))?));
    body.push("fc1", Node::Linear(Linear::init(HEAD_CHANNELS, FC_HIDDEN, &mut rng)));
    body.push("relu_fc1", Node::Relu(Relu::new()));
    body.push("dropout2", Node::Dropout(Dropout::new(cfg.dropout, rng.fork(0xD402))?));
    body.push("fc2", Node::Linear(Linear::init(FC_HIDDEN, cfg.classes, &mut rng)));
    let meta = NetMeta {
        name: cfg.name(),
        group_spec: cfg.group_spec,
        use_se: cfg.use_se,
        input: (3, cfg.input_size, cfg.input_size),
        classes: cfg.classes,
    };
    Ok(Network::new(body, meta))
}

/// Multiply-accumulates of one image through the fused inference graph.
pub fn count_flops<T: Element>(net: &Network<T>) -> Result<u64> {
    let mut frozen = net.clone();
    frozen.set_mode(Mode::Infer);
    fuse_model(&frozen)?.macs(net.input_shape(1))
}

/// Trainable parameters of the training graph (weights, biases, affine γ/β).
pub fn count_params<T: Element>(net: &Network<T>) -> usize {
    net.num_params()
}

/// Output shape of each top-level node for a single image.
pub fn layer_shapes<T: Element>(net: &Network<T>) -> Result<Vec<(String, Shape)>> {
    let mut shape = net.input_shape(1);
    let mut out = Vec::new();
    for it in &net.body.items {
        shape = it.node.output_shape(shape)?;
        out.push((it.name.clone(), shape));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn block_shapes() {
        let mut rng = Rng::new(1);
        let spec = GroupSpec::FixedGroups(2);
        for style in [BlockStyle::Residual, BlockStyle::ShuffleSplit] {
            let keep = build_block::<f32>(&BlockConfig { style, ..BlockConfig::new(100, 100, 1, spec) }, &mut rng).unwrap();
            assert_eq!(keep.output_shape(Shape::new(2, 100, 7, 7)).unwrap(), Shape::new(2, 100, 7, 7));
            let down = build_block::<f32>(&BlockConfig { style, ..BlockConfig::new(24, 100, 2, spec) }, &mut rng).unwrap();
            assert_eq!(down.output_shape(Shape::new(1, 24, 56, 56)).unwrap(), Shape::new(1, 100, 28, 28));
        }
    }

    #[test]
    fn block_config_errors() {
        let spec = GroupSpec::FixedGroups(1);
        assert!(BlockConfig::new(24, 100, 1, spec).validate().is_err());
        assert!(BlockConfig::new(24, 100, 3, spec).validate().is_err());
        let odd = BlockConfig { style: BlockStyle::ShuffleSplit, ..BlockConfig::new(24, 31, 2, spec) };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn residual_block_matches_layerwise_composition() {
        let mut rng = Rng::new(2);
        let cfg = BlockConfig::new(6, 6, 1, GroupSpec::FixedGroups(1));
        let block = build_block::<f64>(&cfg, &mut rng).unwrap();
        let Node::Residual(body) = &block else { panic!("expected residual block") };
        let x = Tensor::<f64>::gaussian((2, 6, 5, 5), 0.0, 1.0, &mut rng);
        let mut h = x.clone();
        for it in &body.items {
            h = match &it.node {
                Node::FbnConv(l) => {
                    let conv = Conv2d::new(ConvParams::new(l.weights[0].value.clone(), None, 1, 0, 1).unwrap());
                    BatchNorm::new(l.norm.clone()).infer(&conv.infer(&h).unwrap()).unwrap()
                }
                other => other.infer(&h).unwrap(),
            };
        }
        let want = h.add(&x).unwrap();
        assert!(block.infer(&x).unwrap().max_abs_diff(&want).unwrap() < 1e-6);
    }

    #[test]
    fn small_stage_channels_and_logits() {
        let net = build_finet::<f32>(&FinetConfig::imagenet(Variant::Small, GroupSpec::FixedGroups(1), false)).unwrap();
        let shapes = layer_shapes(&net).unwrap();
        let width = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1.c;
        assert_eq!([width("stage2"), width("stage3"), width("stage4")], [30, 60, 120]);
        assert_eq!(shapes.last().unwrap().1, Shape::new(1, 1000, 1, 1));
        let cifar = build_finet::<f32>(&FinetConfig::cifar(Variant::Small, GroupSpec::FixedGroups(4), true, 10)).unwrap();
        let shapes = layer_shapes(&cifar).unwrap();
        assert!(shapes.iter().all(|(n, _)| n != "maxpool"));
        assert_eq!(shapes[0].1, Shape::new(1, 24, 32, 32));
        assert_eq!(shapes.last().unwrap().1, Shape::new(1, 10, 1, 1));
    }

    #[test]
    fn params_grow_with_groups_flops_do_not() {
        let stats = |g| {
            let net = build_finet::<f32>(&FinetConfig::imagenet(Variant::Small, GroupSpec::FixedGroups(g), false)).unwrap();
            (count_flops(&net).unwrap(), count_params(&net))
        };
        let (a, b, c) = (stats(1), stats(2), stats(4));
        assert_eq!(a.0, b.0);
        assert_eq!(b.0, c.0);
        assert!(a.1 < b.1 && b.1 < c.1);
    }
}
