//! Reverse-mode gradients over recorded training passes, and the central
//! finite-difference oracle used to check them.
//!
//! Every layer records its own tape during `forward_train`; `backward` here
//! seeds the chain with the loss gradient and collects the accumulated
//! parameter gradients by dotted name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

/// A scalar loss together with its gradient w.r.t. the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<T: Element = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

impl<T: Element> Loss<T> {
    /// `Σ weights·output`.
    pub fn weighted_sum(output: &Tensor<T>, weights: &Tensor<T>) -> Result<Self> {
        output.expect_shape(weights.shape())?;
        let value = output.data().iter().zip(weights.data()).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        Ok(Loss { value, grad: weights.clone() })
    }

    /// Mean of every output element.
    pub fn mean(output: &Tensor<T>) -> Self {
        let inv = 1.0 / output.len() as f64;
        Loss { value: output.sum().to_f64() * inv, grad: Tensor::full(output.shape(), T::from_f64(inv)) }
    }
}

/// Mean softmax cross-entropy over a `(n, classes, 1, 1)` logit tensor.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Loss<T>> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!("logits must be (n, classes, 1, 1), got {s}")));
    }
    if labels.len() != s.n {
        return Err(Error::shape(format!("{} labels for a batch of {}", labels.len(), s.n)));
    }
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= s.c {
            return Err(Error::shape(format!("label {label} out of range for {} classes", s.c)));
        }
        let row = logits.sample(n);
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label].to_f64();
        for (c, (g, e)) in grad.sample_mut(n).iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            *g = T::from_f64((p - if c == label { 1.0 } else { 0.0 }) * inv_n);
        }
    }
    Ok(Loss { value: total * inv_n, grad })
}

/// Per-parameter gradients keyed by dotted name, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap<T: Element = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

/// Differentiates `loss` through the pass most recently recorded by
/// `model.forward_train`. Parameter gradients are reset first, so the result
/// reflects this loss alone.
pub fn backward<T: Element, L: Layer<T> + ?Sized>(model: &mut L, loss: &Loss<T>) -> Result<GradientMap<T>> {
    if !loss.value.is_finite() || !loss.grad.all_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({})", loss.value)));
    }
    model.visit_params_mut("", &mut |_, p| p.zero_grad());
    let input = model.backward(&loss.grad)?;
    let mut params = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        params.insert(name.to_string(), p.grad.clone());
    });
    Ok(GradientMap { params, input })
}

/// Anything whose named `f64` parameters can be read and perturbed.
pub trait ParamStore: Clone {
    fn read(&self, name: &str) -> Option<Tensor<f64>>;
    fn write(&mut self, name: &str, index: usize, value: f64) -> bool;
}

impl<L: Layer<f64> + Clone> ParamStore for L {
    fn read(&self, name: &str) -> Option<Tensor<f64>> {
        let mut out = None;
        self.visit_params("", &mut |n, p: &Param<f64>| {
            if n == name {
                out = Some(p.value.clone());
            }
        });
        out
    }

    fn write(&mut self, name: &str, index: usize, value: f64) -> bool {
        let mut hit = false;
        self.visit_params_mut("", &mut |n, p| {
            if n == name && index < p.value.len() {
                p.value.data_mut()[index] = value;
                hit = true;
            }
        });
        hit
    }
}

/// A bare tensor is a store with a single anonymous parameter; any name
/// addresses it. Used to differentiate with respect to inputs.
impl ParamStore for Tensor<f64> {
    fn read(&self, _name: &str) -> Option<Tensor<f64>> {
        Some(self.clone())
    }

    fn write(&mut self, _name: &str, index: usize, value: f64) -> bool {
        match self.data_mut().get_mut(index) {
            Some(slot) => {
                *slot = value;
                true
            }
            None => false,
        }
    }
}

/// Central-difference estimate `(loss(p+h) − loss(p−h)) / 2h` of the gradient
/// of `loss_fn` w.r.t. every element of parameter `param`. Each evaluation runs
/// on a fresh clone of `store`, so stateful forward passes do not leak between
/// probes.
pub fn finite_diff_grad<S, F>(store: &S, param: &str, h: f64, loss_fn: F) -> Result<Tensor<f64>>
where
    S: ParamStore,
    F: Fn(&mut S) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let base = store.read(param).ok_or_else(|| Error::config(format!("no parameter named {param}")))?;
    let mut grad = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let orig = base.data()[i];
        let eval = |v: f64| -> Result<f64> {
            let mut probe = store.clone();
            probe.write(param, i, v);
            loss_fn(&mut probe)
        };
        let plus = eval(orig + h)?;
        let minus = eval(orig - h)?;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Normwise relative error `max|a−b| / max(max|a|, max|b|, 1e-8)`.
///
/// Elementwise ratios are dominated by round-off on entries that are
/// analytically zero (BN gradients have many), so the scale is taken over the
/// whole tensor.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    Ok(diff / scale)
}

/// Result of checking one layer's analytic gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(name, relative error)` for every parameter and for `"input"`.
    pub errors: Vec<(String, f64)>,
    /// `(name, max |gradient|)` over analytic and numeric values, same order.
    pub magnitudes: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    /// Entries whose error exceeds `tol`, ignoring gradients smaller than
    /// `floor` everywhere. A shift that feeds straight into a normalization
    /// has a true gradient of zero, and the ratio then only reflects the
    /// round-off of the difference quotient.
    pub fn failures(&self, tol: f64, floor: f64) -> Vec<(String, f64)> {
        self.errors
            .iter()
            .zip(&self.magnitudes)
            .filter(|((_, e), (_, m))| *e > tol && *m >= floor)
            .map(|(e, _)| e.clone())
            .collect()
    }
}

/// Compares `backward` against central differences for every parameter of
/// `layer` and for its input, under the loss `Σ r·forward_train(x)` with a
/// seeded random weighting `r`.
pub fn gradcheck<L>(layer: &L, x: &Tensor<f64>, h: f64, seed: u64) -> Result<GradCheck>
where
    L: Layer<f64> + Clone,
{
    let out_shape: Shape = layer.output_shape(x.shape())?;
    let r = Tensor::<f64>::gaussian(out_shape, 0.0, 1.0, &mut Rng::new(seed).fork(0x1055));
    let loss_of = |model: &mut L, input: &Tensor<f64>| -> Result<f64> {
        let y = model.forward_train(input)?;
        model.clear_tape();
        Ok(Loss::weighted_sum(&y, &r)?.value)
    };

    let mut model = layer.clone();
    let y = model.forward_train(x)?;
    let grads = backward(&mut model, &Loss::weighted_sum(&y, &r)?)?;

    let mut errors = Vec::new();
    let mut magnitudes = Vec::new();
    let mut record = |name: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>| -> Result<()> {
        errors.push((name.to_string(), relative_error(analytic, numeric)?));
        magnitudes.push((name.to_string(), analytic.max_abs().max(numeric.max_abs())));
        Ok(())
    };
    for (name, analytic) in &grads.params {
        let numeric = finite_diff_grad(layer, name, h, |m| loss_of(m, x))?;
        record(name, analytic, &numeric)?;
    }
    let numeric = finite_diff_grad(x, "input", h, |xi| loss_of(&mut layer.clone(), xi))?;
    record("input", &grads.input, &numeric)?;
    Ok(GradCheck { errors, magnitudes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{BatchNorm, Conv2d, ConvParams, Linear};
    use crate::graph::{NetMeta, Network, Node, Seq};
    use crate::norm::NormState;

    #[test]
    fn quadratic_oracle() {
        let p = Tensor::<f64>::vector(vec![3.0]);
        let g = finite_diff_grad(&p, "p", 1e-5, |t| Ok(0.5 * t.data()[0] * t.data()[0])).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
        let z = finite_diff_grad(&p, "p", 1e-5, |_| Ok(7.0)).unwrap();
        assert_eq!(z.data()[0], 0.0);
        assert!(finite_diff_grad(&p, "p", 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn linear_sum_gives_input() {
        // loss = Σ w·x over a bias-free 1×1 conv with one output: grad(w) = Σ_pixels x.
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::gaussian((1, 3, 1, 1), 0.0, 1.0, &mut rng);
        let w = Tensor::gaussian((1, 3, 1, 1), 0.0, 1.0, &mut rng);
        let mut conv = Conv2d::new(ConvParams::new(w, None, 1, 0, 1).unwrap());
        let y = conv.forward_train(&x).unwrap();
        let g = backward(&mut conv, &Loss::weighted_sum(&y, &Tensor::full(y.shape(), 1.0)).unwrap()).unwrap();
        assert!(g.params["weight"].max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn bn_mean_loss() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::gaussian((4, 2, 3, 3), 1.0, 2.0, &mut rng);
        let mut bn = BatchNorm::new(NormState::new(2, true));
        let y = bn.forward_train(&x).unwrap();
        let g = backward(&mut bn, &Loss::mean(&y)).unwrap();
        let count = y.len() as f64;
        for &b in g.params["beta"].data() {
            assert!((b - 36.0 / count).abs() < 1e-12);
        }
        assert!(g.params["gamma"].max_abs() < 1e-12);
        assert!(g.input.max_abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut bn = BatchNorm::<f64>::new(NormState::new(2, true));
        let loss = Loss { value: 0.0, grad: Tensor::zeros((2, 2, 2, 2)) };
        assert!(matches!(backward(&mut bn, &loss), Err(Error::State(_))));
        let bad = Loss { value: f64::NAN, grad: Tensor::zeros((2, 2, 2, 2)) };
        assert!(matches!(backward(&mut bn, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_bn_stack_self_consistent() {
        let mut rng = Rng::new(6);
        let mut body = Seq::default();
        body.push("conv", Node::Conv(Conv2d::new(ConvParams::init(3, 4, 1, 1, 0, 1, &mut rng).unwrap())));
        body.push("bn", Node::BatchNorm(BatchNorm::new(NormState::new(4, true))));
        let net = Network::new(body, NetMeta::default());
        let x = Tensor::gaussian((3, 3, 4, 4), 0.0, 1.0, &mut rng);
        let report = gradcheck(&net, &x, 1e-5, 11).unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn cross_entropy_matches_differences() {
        let mut rng = Rng::new(7);
        let logits = Tensor::<f64>::gaussian((3, 5, 1, 1), 0.0, 2.0, &mut rng);
        let labels = [0, 4, 2];
        let loss = softmax_cross_entropy(&logits, &labels).unwrap();
        let numeric =
            finite_diff_grad(&logits, "", 1e-5, |l| Ok(softmax_cross_entropy(l, &labels)?.value)).unwrap();
        assert!(relative_error(&loss.grad, &numeric).unwrap() < 1e-6);
        let uniform = softmax_cross_entropy(&Tensor::<f64>::zeros((2, 10, 1, 1)), &[1, 2]).unwrap();
        assert!((uniform.value - 10f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 5, 1]).is_err());
    }

    #[test]
    fn gradients_add_over_losses() {
        let mut rng = Rng::new(8);
        let lin = Linear::<f64>::init(4, 3, &mut rng);
        let x = Tensor::gaussian((2, 4, 1, 1), 0.0, 1.0, &mut rng);
        let (ra, rb) = (Tensor::gaussian((2, 3, 1, 1), 0.0, 1.0, &mut rng), Tensor::gaussian((2, 3, 1, 1), 0.0, 1.0, &mut rng));
        let grad_for = |r: &Tensor<f64>| {
            let mut m = lin.clone();
            let y = m.forward_train(&x).unwrap();
            backward(&mut m, &Loss::weighted_sum(&y, r).unwrap()).unwrap()
        };
        let (ga, gb, gab) = (grad_for(&ra), grad_for(&rb), grad_for(&ra.add(&rb).unwrap()));
        for name in ["weight", "bias"] {
            let sum = ga.params[name].add(&gb.params[name]).unwrap();
            assert!(sum.max_abs_diff(&gab.params[name]).unwrap() < 1e-12);
        }
    }
}
