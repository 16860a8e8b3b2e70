//! Central-difference checks (f64, h = 1e-5) for every layer type, five seeds
//! each, plus whole-block and whole-network checks under cross-entropy.

use finegrain::autograd::{backward, finite_diff_grad, gradcheck, relative_error, softmax_cross_entropy};
use finegrain::convnet::{
    BatchNorm, Conv2d, ConvParams, Dropout, FbnConvLayer, GlobalAvgPool, Linear, MaxPool, Relu, SqueezeExcite,
};
use finegrain::finet::{build_block, BlockConfig, BlockStyle};
use finegrain::graph::{Branches, ChannelShuffle};
use finegrain::param::{Param, ParamKind};
use finegrain::{GroupSpec, Item, Layer, NetMeta, Network, Node, NormState, Rng, Seq, Shape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 5;
/// Gradients below this everywhere are structurally zero (see `failures`).
const FLOOR: f64 = 1e-7;

fn perturbed_state(c: usize, affine: bool, rng: &mut Rng) -> NormState<f64> {
    let mut st = NormState::new(c, affine);
    if affine {
        st.gamma.value = Tensor::gaussian((1, c, 1, 1), 1.0, 0.3, rng);
        st.beta.value = Tensor::gaussian((1, c, 1, 1), 0.0, 0.3, rng);
    }
    st
}

fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, bias: bool, rng: &mut Rng) -> Conv2d<f64> {
    let mut p = ConvParams::init(c_in, c_out, k, stride, k / 2, groups, rng).unwrap();
    if bias {
        p.bias = Some(Param::new(Tensor::gaussian((1, c_out, 1, 1), 0.0, 0.1, rng), ParamKind::Bias));
    }
    Conv2d::new(p)
}

fn check(name: &str, shape: Shape, make: impl Fn(&mut Rng) -> Node<f64>) {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(0x6AD + seed);
        let layer = make(&mut rng);
        let x = Tensor::gaussian(shape, 0.0, 1.0, &mut rng);
        let report = gradcheck(&layer, &x, H, seed).unwrap();
        assert!(report.errors.iter().any(|(n, _)| n == "input"));
        let failures = report.failures(TOL, FLOOR);
        assert!(failures.is_empty(), "{name} seed {seed}: {failures:?}");
    }
}

#[test]
fn conv_variants() {
    check("conv", Shape::new(2, 3, 5, 5), |r| Node::Conv(conv(3, 4, 3, 1, 1, true, r)));
    check("conv-stride", Shape::new(2, 3, 6, 6), |r| Node::Conv(conv(3, 5, 3, 2, 1, false, r)));
    check("conv-1x1", Shape::new(3, 4, 3, 3), |r| Node::Conv(conv(4, 2, 1, 1, 1, true, r)));
    check("conv-grouped", Shape::new(2, 4, 5, 5), |r| Node::Conv(conv(4, 6, 3, 1, 2, true, r)));
    check("conv-depthwise", Shape::new(2, 4, 5, 5), |r| Node::Conv(conv(4, 4, 3, 2, 4, false, r)));
}

#[test]
fn batch_norm() {
    check("bn", Shape::new(3, 4, 3, 3), |r| Node::BatchNorm(BatchNorm::new(perturbed_state(4, true, r))));
    check("bn-no-affine", Shape::new(4, 2, 2, 2), |r| Node::BatchNorm(BatchNorm::new(perturbed_state(2, false, r))));
}

#[test]
fn fbn_conv() {
    for (g, affine) in [(1, true), (2, true), (3, false), (4, true)] {
        check(&format!("fbn G={g}"), Shape::new(3, 8, 4, 4), |r| {
            let mut l = FbnConvLayer::init(8, 3, 3, 1, 1, GroupSpec::FixedGroups(g), affine, r).unwrap();
            l.norm = perturbed_state(g * 3, affine, r);
            Node::FbnConv(l)
        });
    }
    // Uneven partition (7 channels in 3 groups) and channels-per-group form.
    check("fbn uneven", Shape::new(3, 7, 4, 4), |r| {
        Node::FbnConv(FbnConvLayer::init(7, 2, 1, 2, 0, GroupSpec::FixedGroups(3), true, r).unwrap())
    });
    check("fbn C/G", Shape::new(3, 6, 3, 3), |r| {
        Node::FbnConv(FbnConvLayer::init(6, 4, 1, 1, 0, GroupSpec::ChannelsPerGroup(2), true, r).unwrap())
    });
}

#[test]
fn elementwise_and_pooling() {
    check("relu", Shape::new(2, 3, 4, 4), |_| Node::Relu(Relu::new()));
    check("max-pool", Shape::new(2, 3, 6, 6), |_| Node::MaxPool(MaxPool::new(3, 2, 1)));
    check("max-pool-2", Shape::new(2, 2, 4, 4), |_| Node::MaxPool(MaxPool::new(2, 2, 0)));
    check("global-avg-pool", Shape::new(2, 5, 3, 3), |_| Node::GlobalAvgPool(GlobalAvgPool::new()));
    check("channel-shuffle", Shape::new(2, 6, 2, 3), |_| Node::ChannelShuffle(ChannelShuffle { groups: 3 }));
}

#[test]
fn dense_layers() {
    check("linear", Shape::new(4, 6, 1, 1), |r| Node::Linear(Linear::init(6, 3, r)));
    check("dropout", Shape::new(3, 4, 3, 3), |r| Node::Dropout(Dropout::new(0.4, r.fork(1)).unwrap()));
    check("squeeze-excite", Shape::new(2, 6, 3, 3), |r| {
        Node::SqueezeExcite(SqueezeExcite::from_parts(Linear::init(6, 3, r), Linear::init(3, 6, r)).unwrap())
    });
}

#[test]
fn composites() {
    check("residual", Shape::new(2, 4, 4, 4), |r| {
        let mut s = Seq::default();
        // No conv bias: BN would cancel it and its true gradient is zero.
        s.push("conv", Node::Conv(conv(4, 4, 3, 1, 1, false, r)));
        s.push("bn", Node::BatchNorm(BatchNorm::new(perturbed_state(4, true, r))));
        Node::Residual(s)
    });
    check("branches-split", Shape::new(2, 6, 3, 3), |r| {
        let right = Seq::new(vec![Item::new("pw", Node::Conv(conv(3, 3, 1, 1, 1, false, r)))]);
        Node::Branches(Branches::new(true, Seq::default(), right))
    });
    check("branches-dup", Shape::new(2, 3, 4, 4), |r| {
        let left = Seq::new(vec![Item::new("dw", Node::Conv(conv(3, 3, 3, 2, 3, false, r)))]);
        let right = Seq::new(vec![Item::new("pw", Node::Conv(conv(3, 2, 3, 2, 1, true, r)))]);
        Node::Branches(Branches::new(false, left, right))
    });
    for style in [BlockStyle::Residual, BlockStyle::ShuffleSplit] {
        for stride in [1, 2] {
            let c_out = if stride == 1 { 8 } else { 12 };
            check(&format!("{style} block stride {stride}"), Shape::new(3, 8, 4, 4), |r| {
                let cfg = BlockConfig {
                    style,
                    use_se: true,
                    se_hidden: 3,
                    ..BlockConfig::new(8, c_out, stride, GroupSpec::FixedGroups(2))
                };
                build_block(&cfg, r).unwrap()
            });
        }
    }
}

#[test]
fn whole_network_under_cross_entropy() {
    let mut rng = Rng::new(42);
    let mut body = Seq::default();
    body.push("conv1", Node::Conv(conv(3, 6, 3, 2, 1, false, &mut rng)));
    body.push("bn1", Node::BatchNorm(BatchNorm::new(NormState::new(6, true))));
    body.push("relu1", Node::Relu(Relu::new()));
    let block = BlockConfig { use_se: true, se_hidden: 2, ..BlockConfig::new(6, 6, 1, GroupSpec::FixedGroups(3)) };
    body.push("block", build_block(&block, &mut rng).unwrap());
    body.push("pool", Node::GlobalAvgPool(GlobalAvgPool::new()));
    body.push("fc", Node::Linear(Linear::init(6, 4, &mut rng)));
    let meta = NetMeta { name: "mini".into(), input: (3, 6, 6), classes: 4, ..NetMeta::default() };
    let net = Network::new(body, meta);
    let x = Tensor::gaussian(net.input_shape(4), 0.0, 1.0, &mut rng);
    let labels = vec![0, 3, 1, 1];

    let mut model = net.clone();
    let loss = softmax_cross_entropy(&model.forward(&x).unwrap(), &labels).unwrap();
    let grads = backward(&mut model, &loss).unwrap();
    assert!(grads.params.len() >= 10);
    for (name, analytic) in &grads.params {
        let numeric = finite_diff_grad(&net, name, H, |m: &mut Network<f64>| {
            let y = m.forward(&x)?;
            m.clear_tape();
            Ok(softmax_cross_entropy(&y, &labels)?.value)
        })
        .unwrap();
        let vanishing = analytic.max_abs() < FLOOR && numeric.max_abs() < FLOOR;
        let err = relative_error(analytic, &numeric).unwrap();
        assert!(err <= TOL || vanishing, "{name}: {err:e}");
    }
}
