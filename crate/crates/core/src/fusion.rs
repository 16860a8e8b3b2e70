//! Folding frozen normalization statistics into convolution weights.
//!
//! Sign convention: the fused convolution computes `Σ w'·x + bias`, with the
//! constant stored as an additive bias `β − γ·μ'/σ'` (summed over groups for
//! FBN), where `σ' = sqrt(running_var + ε)`.

use crate::convnet::{BatchNorm, Conv2d, ConvParams, FbnConvLayer, FusionOrigin};
use crate::error::{Error, Result};
use crate::graph::{Branches, Item, Network, Node, Seq};
use crate::norm::{Mode, NormState};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

fn frozen<T: Element>(st: &NormState<T>, recording: bool, what: &str) -> Result<()> {
    if recording {
        return Err(Error::State(format!("{what} has a recorded training pass; statistics are not frozen")));
    }
    st.validate()
}

/// Folds `bn` into `conv`: `w' = γ·w/σ'` per output channel and
/// `bias = β + γ·(b − μ')/σ'`, with `b` the conv's own bias (0 when absent).
pub fn fold_bn_into_conv<T: Element>(conv: &Conv2d<T>, bn: &BatchNorm<T>) -> Result<Conv2d<T>> {
    frozen(&bn.state, bn.is_recording(), "batch norm")?;
    let p = &conv.params;
    p.validate()?;
    let c_out = p.c_out();
    if bn.state.channels() != c_out {
        return Err(Error::shape(format!("batch norm over {} channels after a conv with {c_out} outputs", bn.state.channels())));
    }
    let per_out = p.weight.value.len() / c_out;
    let mut weight = p.weight.value.clone();
    let mut bias = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let (gamma, beta) = bn.state.affine_at(o);
        let scale = gamma / bn.state.running_std(o);
        for v in &mut weight.data_mut()[o * per_out..(o + 1) * per_out] {
            *v = T::from_f64(v.to_f64() * scale);
        }
        let b = p.bias.as_ref().map_or(0.0, |b| b.value.data()[o].to_f64());
        bias.push(T::from_f64(beta + scale * (b - bn.state.running_mean.data()[o].to_f64())));
    }
    let params = ConvParams::new(weight, Some(Tensor::vector(bias)), p.stride, p.padding, p.groups)?;
    Ok(Conv2d::fused(params, FusionOrigin { sources: Vec::new(), groups: 1 }))
}

/// Folds an FBN convolution into one full-width standard convolution.
///
/// Group `g`'s kernel block, scaled per output channel by `γ_{g,c}/σ'_{g,c}`,
/// is placed at that group's input-channel range; the bias sums
/// `β_{g,c} − γ_{g,c}·μ'_{g,c}/σ'_{g,c}` over groups.
pub fn fold_fbn_into_conv<T: Element>(layer: &FbnConvLayer<T>) -> Result<Conv2d<T>> {
    frozen(&layer.norm, layer.is_recording(), "FBN conv")?;
    layer.validate()?;
    let (c_in, c_out, k) = (layer.c_in(), layer.c_out(), layer.kernel());
    let kk = k * k;
    let mut weight = vec![0.0f64; c_out * c_in * kk];
    let mut bias = vec![0.0f64; c_out];
    for (g, w) in layer.weights.iter().enumerate() {
        let lo = layer.bounds[g];
        let cin_g = layer.bounds[g + 1] - lo;
        let wd = w.value.data();
        for c in 0..c_out {
            let ch = g * c_out + c;
            let (gamma, beta) = layer.norm.affine_at(ch);
            let scale = gamma / layer.norm.running_std(ch);
            bias[c] += beta - scale * layer.norm.running_mean.data()[ch].to_f64();
            for j in 0..cin_g {
                let src = &wd[(c * cin_g + j) * kk..(c * cin_g + j + 1) * kk];
                let dst = &mut weight[(c * c_in + lo + j) * kk..(c * c_in + lo + j + 1) * kk];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.to_f64() * scale;
                }
            }
        }
    }
    let weight = Tensor::from_vec((c_out, c_in, k, k), weight.into_iter().map(T::from_f64).collect())?;
    let bias = Tensor::vector(bias.into_iter().map(T::from_f64).collect());
    let params = ConvParams::new(weight, Some(bias), layer.stride, layer.padding, 1)?;
    Ok(Conv2d::fused(params, FusionOrigin { sources: Vec::new(), groups: layer.groups() }))
}

/// Rewrites every conv+BN pair and every FBN convolution into a single fused
/// convolution. The input must be in inference mode; the result is a fresh
/// network in inference mode. Fusing an already-fused network is a no-op.
pub fn fuse_model<T: Element>(net: &Network<T>) -> Result<Network<T>> {
    if net.mode != Mode::Infer {
        return Err(Error::State("fusion requires a network in inference mode".into()));
    }
    let body = fuse_seq(&net.body, "")?;
    let mut out = Network::new(body, net.meta.clone());
    out.set_mode(Mode::Infer);
    Ok(out)
}

fn qualified(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fuse_seq<T: Element>(seq: &Seq<T>, prefix: &str) -> Result<Seq<T>> {
    let mut out = Vec::with_capacity(seq.items.len());
    let mut i = 0;
    while i < seq.items.len() {
        let item = &seq.items[i];
        let full = qualified(prefix, &item.name);
        let fused = match &item.node {
            Node::Conv(conv) => match seq.items.get(i + 1) {
                Some(Item { name: bn_name, node: Node::BatchNorm(bn) }) => {
                    let mut f = fold_bn_into_conv(conv, bn)
                        .map_err(|e| Error::Unfusable(format!("{full} + {bn_name}: {e}")))?;
                    f.origin = Some(FusionOrigin { sources: vec![item.name.clone(), bn_name.clone()], groups: 1 });
                    i += 1;
                    Node::Conv(f)
                }
                _ => item.node.clone(),
            },
            Node::FbnConv(layer) => {
                let mut f = fold_fbn_into_conv(layer).map_err(|e| Error::Unfusable(format!("{full}: {e}")))?;
                f.origin = Some(FusionOrigin { sources: vec![item.name.clone()], groups: layer.groups() });
                Node::Conv(f)
            }
            Node::BatchNorm(_) => {
                return Err(Error::Unfusable(format!("{full}: batch norm does not follow a convolution")));
            }
            Node::Residual(body) => Node::Residual(fuse_seq(body, &full)?),
            Node::Seq(body) => Node::Seq(fuse_seq(body, &full)?),
            Node::Branches(b) => Node::Branches(Branches::new(
                b.split,
                fuse_seq(&b.left, &qualified(&full, "left"))?,
                fuse_seq(&b.right, &qualified(&full, "right"))?,
            )),
            other => other.clone(),
        };
        out.push(Item::new(item.name.clone(), fused));
        i += 1;
    }
    Ok(Seq::new(out))
}

/// Differences between two networks on the same probe inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionReport {
    pub max_abs_diff: f64,
    /// Top-level node name (of the reference network) and the max abs diff of
    /// its output, for nodes present in both networks.
    pub per_layer: Vec<(String, f64)>,
    pub probes: usize,
}

impl std::fmt::Display for FusionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, d) in &self.per_layer {
            writeln!(f, "layer={name} diff={d:e}")?;
        }
        writeln!(f, "probes={}", self.probes)?;
        write!(f, "max_abs_diff={:e}", self.max_abs_diff)
    }
}

/// Seeded standard-normal probe batch for `net`'s declared input.
pub fn probe_inputs<T: Element>(net: &Network<T>, n_probes: usize, seed: u64) -> Tensor<T> {
    Tensor::gaussian(net.input_shape(n_probes), 0.0, 1.0, &mut Rng::new(seed))
}

/// Runs both networks in inference on the same `n_probes` seeded inputs and
/// reports end-to-end and per-node differences. A fused convolution is
/// matched to the last node it absorbed.
pub fn verify_fusion<T: Element>(net: &Network<T>, fused: &Network<T>, n_probes: usize, seed: u64) -> Result<FusionReport> {
    if n_probes == 0 {
        return Err(Error::config("verification needs at least one probe"));
    }
    if net.meta.input != fused.meta.input {
        return Err(Error::shape(format!("networks expect inputs {:?} and {:?}", net.meta.input, fused.meta.input)));
    }
    let x = probe_inputs(net, n_probes, seed);
    let out_a: Shape = net.output_shape(x.shape())?;
    let out_b = fused.output_shape(x.shape())?;
    if out_a != out_b {
        return Err(Error::shape(format!("network outputs differ in shape: {out_a} vs {out_b}")));
    }
    let ta = net.trace(&x)?;
    let tb = fused.trace(&x)?;
    let mut per_layer = Vec::new();
    for (item, (_, yb)) in fused.body.items.iter().zip(&tb) {
        let key = match &item.node {
            Node::Conv(Conv2d { origin: Some(o), .. }) => o.sources.last().cloned().unwrap_or_else(|| item.name.clone()),
            _ => item.name.clone(),
        };
        if let Some((_, ya)) = ta.iter().find(|(n, _)| *n == key) {
            if ya.shape() == yb.shape() {
                per_layer.push((key, ya.max_abs_diff(yb)?.to_f64()));
            }
        }
    }
    let (ya, yb) = (&ta.last().expect("non-empty trace").1, &tb.last().expect("non-empty trace").1);
    Ok(FusionReport { max_abs_diff: ya.max_abs_diff(yb)?.to_f64(), per_layer, probes: n_probes })
}
