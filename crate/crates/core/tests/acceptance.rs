//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! A criterion that cannot run in this environment (no CIFAR-10 binaries)
//! prints `FAIL (blocked: ...)`. The process exits nonzero only when a
//! criterion that did run fails.

use std::time::Instant;

use finegrain::autograd::gradcheck;
use finegrain::checkpoint::Checkpoint;
use finegrain::cli::{bench, cmd_train, load_datasets};
use finegrain::config::{DatasetKind, RunConfig};
use finegrain::convnet::{
    BatchNorm, Conv2d, ConvParams, Dropout, FbnConvLayer, GlobalAvgPool, Linear, MaxPool, Relu, SqueezeExcite,
};
use finegrain::data::{self, SyntheticKind};
use finegrain::finet::{build_finet, count_flops, count_params, FinetConfig, Variant};
use finegrain::fusion::{fold_fbn_into_conv, fuse_model, verify_fusion};
use finegrain::graph::{Branches, ChannelShuffle};
use finegrain::ops::concat_channels;
use finegrain::train::train_epochs;
use finegrain::{GroupSpec, Item, Layer, Mode, NormState, Rng, Seq, Shape, Tensor};

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

/// What a criterion reports, plus numbers that must reproduce bit for bit.
struct Run {
    outcome: Outcome,
    fingerprint: Vec<f64>,
}

fn judged(ok: bool, detail: String, fingerprint: Vec<f64>) -> Run {
    Run { outcome: if ok { Outcome::Pass(detail) } else { Outcome::Fail(detail) }, fingerprint }
}

fn max_abs_diff<T: finegrain::Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).abs()).fold(0.0, f64::max)
}

fn randomize_stats(st: &mut NormState<f64>, rng: &mut Rng) {
    let c = st.channels();
    st.running_mean = Tensor::gaussian((1, c, 1, 1), 0.0, 0.5, rng);
    st.running_var = Tensor::from_vec(Shape::new(1, c, 1, 1), (0..c).map(|_| rng.uniform(0.5, 2.0)).collect()).unwrap();
    if st.affine {
        st.gamma.value = Tensor::gaussian((1, c, 1, 1), 1.0, 0.2, rng);
        st.beta.value = Tensor::gaussian((1, c, 1, 1), 0.0, 0.2, rng);
    }
}

fn pick<T: Copy>(rng: &mut Rng, xs: &[T]) -> T {
    xs[rng.below(xs.len() as u64) as usize]
}

fn fusion_equivalence() -> Run {
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut fp = Vec::new();
    for case in 0..200u64 {
        let mut rng = Rng::new(1000 + case);
        let c_in = pick(&mut rng, &[4, 8, 16]);
        let c_out = pick(&mut rng, &[3, 8]);
        let k = pick(&mut rng, &[1, 3]);
        let groups: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&g| g <= c_in).collect();
        let g = pick(&mut rng, &groups);
        let stride = pick(&mut rng, &[1, 2]);
        let padding = pick(&mut rng, &[0, k / 2]);
        let affine = rng.bernoulli(0.8);
        let mut layer =
            FbnConvLayer::<f64>::init(c_in, c_out, k, stride, padding, GroupSpec::FixedGroups(g), affine, &mut rng)
                .unwrap();
        randomize_stats(&mut layer.norm, &mut rng);
        let side = 5 + rng.below(5) as usize;
        let x = Tensor::gaussian((2, c_in, side, side), 0.0, 1.0, &mut rng);

        let fused = fold_fbn_into_conv(&layer).unwrap();
        let d64 = max_abs_diff(&layer.infer(&x).unwrap(), &fused.infer(&x).unwrap());
        let layer32 = layer.cast::<f32>();
        let x32 = x.cast::<f32>();
        let d32 = max_abs_diff(&layer32.infer(&x32).unwrap(), &fold_fbn_into_conv(&layer32).unwrap().infer(&x32).unwrap());
        worst64 = worst64.max(d64);
        worst32 = worst32.max(d32);
        fp.extend([d64, d32]);
    }
    judged(
        worst32 <= 1e-4 && worst64 <= 1e-9,
        format!("200 configurations, max diff f32={worst32:.3e} (<=1e-4), f64={worst64:.3e} (<=1e-9)"),
        fp,
    )
}

fn degeneracy() -> Run {
    let mut worst = 0.0f64;
    let mut fp = Vec::new();
    for seed in 0..50u64 {
        let mut rng = Rng::new(2000 + seed);
        let (c_in, c_out, k) = (pick(&mut rng, &[3, 6]), pick(&mut rng, &[4, 5]), pick(&mut rng, &[1, 3]));
        let mut fbn =
            FbnConvLayer::<f64>::init(c_in, c_out, k, 1, k / 2, GroupSpec::FixedGroups(1), true, &mut rng).unwrap();
        randomize_stats(&mut fbn.norm, &mut rng);
        let conv = Conv2d::new(ConvParams::new(fbn.weights[0].value.clone(), None, 1, k / 2, 1).unwrap());
        let mut bn = BatchNorm::new(fbn.norm.clone());
        let x = Tensor::gaussian((3, c_in, 6, 6), 0.5, 1.5, &mut rng);

        let infer = max_abs_diff(&fbn.infer(&x).unwrap(), &bn.infer(&conv.infer(&x).unwrap()).unwrap());
        let mut conv_t = conv.clone();
        let train = max_abs_diff(
            &fbn.forward_train(&x).unwrap(),
            &bn.forward_train(&conv_t.forward_train(&x).unwrap()).unwrap(),
        );
        let stats = max_abs_diff(&fbn.norm.running_mean, &bn.state.running_mean)
            .max(max_abs_diff(&fbn.norm.running_var, &bn.state.running_var));
        worst = worst.max(infer).max(train).max(stats);
        fp.extend([infer, train, stats]);
    }
    judged(worst <= 1e-6, format!("50 inputs, train+infer+running stats max diff {worst:.3e} (<=1e-6)"), fp)
}

fn associativity() -> Run {
    let mut worst = 0.0f64;
    let mut fp = Vec::new();
    for case in 0..100u64 {
        let mut rng = Rng::new(3000 + case);
        let c_in = pick(&mut rng, &[4, 6, 8, 12]);
        let groups: Vec<usize> = [1, 2, 3, 4].into_iter().filter(|&g| g <= c_in).collect();
        let g = pick(&mut rng, &groups);
        let (c_out, k, stride) = (pick(&mut rng, &[2, 5]), pick(&mut rng, &[1, 3]), pick(&mut rng, &[1, 2]));
        let mut layer =
            FbnConvLayer::<f64>::init(c_in, c_out, k, stride, k / 2, GroupSpec::FixedGroups(g), false, &mut rng).unwrap();
        layer.norm = NormState::identity(g * c_out, false);
        let full = layer.weights[1..]
            .iter()
            .fold(layer.weights[0].value.clone(), |acc, w| concat_channels(&acc, &w.value).unwrap());
        let conv = Conv2d::new(ConvParams::new(full, None, stride, k / 2, 1).unwrap());
        let x = Tensor::gaussian((2, c_in, 7, 7), 0.0, 1.0, &mut rng);
        let d = max_abs_diff(&layer.infer(&x).unwrap(), &conv.infer(&x).unwrap());
        worst = worst.max(d);
        fp.push(d);
    }
    judged(worst <= 1e-5, format!("100 cases, expand-then-sum vs conv max diff {worst:.3e} (<=1e-5)"), fp)
}

fn standardization() -> Run {
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    let mut fp = Vec::new();
    for case in 0..40u64 {
        let mut rng = Rng::new(4000 + case);
        let (n, side) = (pick(&mut rng, &[2, 4, 8]), pick(&mut rng, &[4, 6, 8]));
        let g = pick(&mut rng, &[1, 2, 4]);
        let mut layer =
            FbnConvLayer::<f64>::init(8, 6, 3, 1, 1, GroupSpec::FixedGroups(g), true, &mut rng).unwrap();
        randomize_stats(&mut layer.norm, &mut rng);
        let x = Tensor::gaussian((n, 8, side, side), 2.0, 3.0, &mut rng);
        assert!(n * side * side >= 32);
        layer.forward_train(&x).unwrap();
        let xhat = layer.last_standardized().expect("training pass records the standardized tensor").clone();
        let s = xhat.shape();
        let count = (s.n * s.h * s.w) as f64;
        for c in 0..s.c {
            let vals: Vec<f64> = (0..s.n).flat_map(|i| xhat.plane(i, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt();
            worst_mean = worst_mean.max(mean.abs());
            worst_std = worst_std.max((std - 1.0).abs());
        }
        fp.extend([worst_mean, worst_std]);
    }
    judged(
        worst_mean <= 1e-6 && worst_std <= 1e-3,
        format!("40 batches, max |mean|={worst_mean:.3e} (<=1e-6), max |std-1|={worst_std:.3e} (<=1e-3)"),
        fp,
    )
}

fn gradient_cases(rng: &mut Rng) -> Vec<(&'static str, finegrain::Node<f64>, Shape)> {
    use finegrain::Node;
    let conv = |c_in, c_out, k, s, p, g, bias: bool, rng: &mut Rng| {
        let mut params = ConvParams::init(c_in, c_out, k, s, p, g, rng).unwrap();
        if bias {
            params.bias = Some(finegrain::param::Param::new(
                Tensor::gaussian((1, c_out, 1, 1), 0.0, 0.1, rng),
                finegrain::param::ParamKind::Bias,
            ));
        }
        Node::Conv(Conv2d::new(params))
    };
    let mut bn_state = NormState::new(3, true);
    randomize_stats(&mut bn_state, rng);
    let mut fbn = FbnConvLayer::init(6, 3, 3, 2, 1, GroupSpec::FixedGroups(3), true, rng).unwrap();
    randomize_stats(&mut fbn.norm, rng);
    let fbn_plain = FbnConvLayer::init(4, 3, 1, 1, 0, GroupSpec::ChannelsPerGroup(2), false, rng).unwrap();
    let mut block = Seq::default();
    block.push("dw", conv(4, 4, 3, 1, 1, 4, false, rng));
    block.push("relu", Node::Relu(Relu::new()));
    let branches = Branches::new(
        true,
        Seq::default(),
        Seq::new(vec![Item::new("pw", conv(2, 2, 1, 1, 0, 1, true, rng))]),
    );
    vec![
        ("conv", conv(3, 4, 3, 1, 1, 1, true, rng), Shape::new(2, 3, 5, 5)),
        ("conv-strided-grouped", conv(4, 6, 3, 2, 1, 2, false, rng), Shape::new(2, 4, 6, 6)),
        ("conv-depthwise", conv(4, 4, 3, 1, 1, 4, true, rng), Shape::new(2, 4, 5, 5)),
        ("batch-norm", Node::BatchNorm(BatchNorm::new(bn_state)), Shape::new(3, 3, 4, 4)),
        ("fbn-conv", Node::FbnConv(fbn), Shape::new(3, 6, 5, 5)),
        ("fbn-conv-no-affine", Node::FbnConv(fbn_plain), Shape::new(4, 4, 3, 3)),
        ("relu", Node::Relu(Relu::new()), Shape::new(2, 3, 4, 4)),
        ("max-pool", Node::MaxPool(MaxPool::new(3, 2, 1)), Shape::new(2, 2, 6, 6)),
        ("global-avg-pool", Node::GlobalAvgPool(GlobalAvgPool::new()), Shape::new(2, 3, 4, 4)),
        ("linear", Node::Linear(Linear::init(5, 3, rng)), Shape::new(3, 5, 1, 1)),
        ("dropout", Node::Dropout(Dropout::new(0.3, rng.fork(7)).unwrap()), Shape::new(2, 3, 3, 3)),
        (
            "squeeze-excite",
            Node::SqueezeExcite(SqueezeExcite::from_parts(Linear::init(6, 2, rng), Linear::init(2, 6, rng)).unwrap()),
            Shape::new(2, 6, 3, 3),
        ),
        ("channel-shuffle", Node::ChannelShuffle(ChannelShuffle { groups: 2 }), Shape::new(2, 6, 2, 2)),
        ("residual", Node::Residual(block), Shape::new(2, 4, 4, 4)),
        ("branches", Node::Branches(branches), Shape::new(2, 4, 3, 3)),
    ]
}

fn gradients() -> Run {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut fp = Vec::new();
    for seed in 0..5u64 {
        let mut rng = Rng::new(5000 + seed);
        for (name, layer, shape) in gradient_cases(&mut rng) {
            let x = Tensor::gaussian(shape, 0.0, 1.0, &mut rng);
            let e = gradcheck(&layer, &x, 1e-5, seed).unwrap().max_error();
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
            fp.push(e);
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let (name, _) = worst.iter().copied().fold(("", -1.0), |a, b| if b.1 > a.1 { b } else { a });
    judged(
        max <= 1e-3,
        format!("{} layer types x 5 seeds, max relative error {max:.3e} at {name} (<=1e-3)", worst.len()),
        fp,
    )
}

fn accounting() -> Run {
    let targets = [
        (Variant::Small, false, 42.6e6, 2.388e6),
        (Variant::Large, false, 301.8e6, 4.434e6),
        (Variant::Small, true, 43.0e6, 2.809e6),
        (Variant::Large, true, 303.2e6, 5.812e6),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    let mut fp = Vec::new();
    for (variant, se, flops_t, params_t) in targets {
        let mut flops = Vec::new();
        let mut params = Vec::new();
        for g in [1, 2, 4] {
            let net = build_finet::<f32>(&FinetConfig::imagenet(variant, GroupSpec::FixedGroups(g), se)).unwrap();
            flops.push(count_flops(&net).unwrap() as f64);
            params.push(count_params(&net) as f64);
            if g == 1 && !se {
                let fc: usize = ["fc1", "fc2"]
                    .iter()
                    .map(|n| match net.find(n) {
                        Some(finegrain::Node::Linear(l)) => l.weight.value.len() + l.bias.value.len(),
                        _ => 0,
                    })
                    .sum();
                ok &= (2.0e6..=2.1e6).contains(&(fc as f64));
                parts.push(format!("{variant} fc={:.3}M", fc as f64 / 1e6));
            }
        }
        let within = |v: f64, t: f64| (v - t).abs() <= 0.05 * t;
        ok &= within(flops[0], flops_t) && within(params[0], params_t);
        ok &= flops.iter().all(|&f| f == flops[0]);
        ok &= params.windows(2).all(|w| w[1] > w[0]);
        parts.push(format!(
            "{variant}{} {:.2}M/{:.3}M (target {:.1}M/{:.3}M)",
            if se { "+SE" } else { "" },
            flops[0] / 1e6,
            params[0] / 1e6,
            flops_t / 1e6,
            params_t / 1e6
        ));
        fp.extend(flops.iter().chain(&params));
    }
    judged(ok, parts.join(", ") + "; FLOPs constant and params increasing over G=1,2,4", fp)
}

/// Finet-Large, G=4, SE on, at 224×224, with running statistics calibrated on
/// a seeded batch so inference behaves like a trained model.
fn large_inference_net() -> finegrain::Network<f32> {
    let mut net = build_finet::<f32>(&FinetConfig::imagenet(Variant::Large, GroupSpec::FixedGroups(4), true)).unwrap();
    let calib = Tensor::gaussian(net.input_shape(8), 0.0, 1.0, &mut Rng::new(77));
    net.calibrate_statistics(&calib).unwrap();
    net.set_mode(Mode::Infer);
    net
}

fn end_to_end_fusion(net: &finegrain::Network<f32>) -> Run {
    let fused = fuse_model(net).unwrap();
    let report = verify_fusion(net, &fused, 16, 7).unwrap();
    judged(
        report.max_abs_diff <= 1e-3,
        format!("Finet-Large G=4 SE, 16 probes at 224x224, max_abs_diff={:.3e} (<=1e-3)", report.max_abs_diff),
        vec![report.max_abs_diff],
    )
}

fn desk_training() -> Run {
    let dir = match data::data_dir(None) {
        Some(d) if data::has_cifar10(&d) => d,
        _ => {
            return Run {
                outcome: Outcome::Blocked(format!(
                    "CIFAR-10 binaries not found; set {} to run the desk-scale training check",
                    data::DATA_DIR_ENV
                )),
                fingerprint: Vec::new(),
            }
        }
    };
    let mut ok = true;
    let mut parts = Vec::new();
    let mut fp = Vec::new();
    for g in [1, 4] {
        let cfg = RunConfig {
            group_spec: GroupSpec::FixedGroups(g),
            dataset: DatasetKind::Cifar10,
            data_dir: Some(dir.clone()),
            ..RunConfig::default()
        };
        let (train, test) = load_datasets(&cfg).unwrap();
        let mut net = build_finet::<f32>(&cfg.finet()).unwrap();
        let tcfg = cfg.train_with_steps(train.len().div_ceil(cfg.batch_size));
        let metrics = match train_epochs(&mut net, &train, Some(&test), &tcfg, |m| {
            eprintln!("  G={g} {m}");
            Ok(())
        }) {
            Ok(m) => m,
            Err(e) => {
                ok = false;
                parts.push(format!("G={g} error: {e}"));
                continue;
            }
        };
        let first = metrics[0].train_loss;
        let last = metrics.last().unwrap();
        let top1 = last.val.map_or(0.0, |v| v.top1);
        let finite = metrics.iter().all(|m| m.train_loss.is_finite() && m.val.is_some_and(|v| v.loss.is_finite()));
        let mut finite_params = true;
        net.visit_params(&mut |_, p| finite_params &= p.value.data().iter().all(|v| v.is_finite()));
        ok &= last.train_loss < 0.6 * first && top1 > 0.35 && finite && finite_params;
        parts.push(format!("G={g} loss {first:.3}->{:.3} top1={top1:.3}", last.train_loss));
        fp.extend([last.train_loss, top1]);
    }
    judged(ok, parts.join(", ") + " (need final loss < 0.6x epoch 1, top1 > 0.35)", fp)
}

fn bench_ordering(net: &finegrain::Network<f32>) -> Run {
    let r = bench(net, 1, 100, 10).unwrap();
    judged(
        r.ratio() > 1.0,
        format!(
            "Finet-Large G=4 SE batch 1: unfused {:.2} img/s, fused {:.2} img/s, ratio {:.3} (>1)",
            r.unfused_images_per_s,
            r.fused_images_per_s,
            r.ratio()
        ),
        Vec::new(),
    )
}

fn reproducibility(first: &[(usize, Vec<f64>)], rerun: &dyn Fn(usize) -> Vec<f64>) -> Run {
    let dir = tempfile::tempdir().unwrap();
    // Both runs write to the same paths: the checkpoint embeds the config,
    // paths included.
    let run = || {
        let cfg = RunConfig {
            dataset: DatasetKind::Synthetic(SyntheticKind::GaussianBlobs),
            train_subset: 192,
            test_subset: 64,
            epochs: 3,
            batch_size: 32,
            milestones: vec![2],
            checkpoint: dir.path().join("run.ckpt"),
            metrics_csv: dir.path().join("run.csv"),
            ..RunConfig::default()
        };
        cmd_train(&cfg, &mut std::io::sink()).unwrap();
        (std::fs::read(&cfg.metrics_csv).unwrap(), std::fs::read(&cfg.checkpoint).unwrap())
    };
    let (csv_a, ck_a) = run();
    let (csv_b, ck_b) = run();
    let ck_stable = Checkpoint::from_bytes(&ck_a, std::path::Path::new("a")).map(|c| c.to_bytes()).ok() == Some(ck_a.clone());
    let mut differing = Vec::new();
    for (id, fp) in first {
        let again = rerun(*id);
        if again.len() != fp.len() || again.iter().zip(fp).any(|(a, b)| a.to_bits() != b.to_bits()) {
            differing.push(id.to_string());
        }
    }
    let ok = csv_a == csv_b && ck_a == ck_b && ck_stable && differing.is_empty();
    let ids: Vec<String> = first.iter().map(|(i, _)| i.to_string()).collect();
    judged(
        ok,
        format!(
            "two seeded training runs: csv identical={}, checkpoint identical={}; criteria {} recomputed bit-identically{}",
            csv_a == csv_b,
            ck_a == ck_b,
            ids.join(","),
            if differing.is_empty() { String::new() } else { format!(" except {}", differing.join(",")) }
        ),
        Vec::new(),
    )
}

fn main() {
    let names = [
        "fusion equivalence",
        "degeneracy to BN",
        "associativity",
        "standardization",
        "gradients",
        "architecture accounting",
        "end-to-end fusion",
        "desk-scale training",
        "bench ordering",
        "reproducibility",
    ];
    let large = large_inference_net();
    let compute = |id: usize| -> Run {
        match id {
            1 => fusion_equivalence(),
            2 => degeneracy(),
            3 => associativity(),
            4 => standardization(),
            5 => gradients(),
            6 => accounting(),
            7 => end_to_end_fusion(&large_inference_net()),
            8 => desk_training(),
            _ => unreachable!(),
        }
    };

    let mut failed_runs = 0;
    let mut fingerprints: Vec<(usize, Vec<f64>)> = Vec::new();
    for id in 1..=10 {
        let start = Instant::now();
        let run = match id {
            1..=6 => compute(id),
            7 => end_to_end_fusion(&large),
            8 => desk_training(),
            9 => bench_ordering(&large),
            _ => reproducibility(&fingerprints, &|i| compute(i).fingerprint),
        };
        let (status, detail) = match run.outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed_runs += 1;
                ("FAIL", d)
            }
            Outcome::Blocked(d) => ("FAIL (blocked)", d),
        };
        println!("{status} [{id}] {}: {detail} [{:.1}s]", names[id - 1], start.elapsed().as_secs_f64());
        if !run.fingerprint.is_empty() && status != "FAIL (blocked)" {
            fingerprints.push((id, run.fingerprint));
        }
    }
    if failed_runs > 0 {
        std::process::exit(1);
    }
}
