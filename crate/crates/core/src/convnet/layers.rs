use crate::convnet::conv::{conv2d, conv2d_backward, conv_out_size, ConvParams};
use crate::error::{Error, Result};
use crate::layer::{join, unrecorded, Layer};
use crate::norm::{bn_backward, bn_forward_infer, bn_forward_train, NormCache, NormState};
use crate::param::{Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

/// Where a fused convolution came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionOrigin {
    /// Names of the nodes folded into this convolution, in graph order.
    pub sources: Vec<String>,
    /// FBN group count of the source layer (1 for plain BN).
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Element = f32> {
    pub params: ConvParams<T>,
    pub origin: Option<FusionOrigin>,
    tape: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    pub fn new(params: ConvParams<T>) -> Self {
        Conv2d { params, origin: None, tape: None }
    }

    pub fn fused(params: ConvParams<T>, origin: FusionOrigin) -> Self {
        Conv2d { params, origin: Some(origin), tape: None }
    }

    pub fn cast<U: Element>(&self) -> Conv2d<U> {
        Conv2d { params: self.params.cast(), origin: self.origin.clone(), tape: None }
    }
}

impl<T: Element> Layer<T> for Conv2d<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.params.output_shape(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.params)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.params)?;
        self.tape = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.tape.take().ok_or_else(|| unrecorded("conv"))?;
        conv2d_backward(&x, &mut self.params, dy)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.params.weight);
        if let Some(b) = &self.params.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.params.weight);
        if let Some(b) = &mut self.params.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        self.params.macs(input)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Element = f32> {
    pub state: NormState<T>,
    tape: Option<NormCache<T>>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(state: NormState<T>) -> Self {
        BatchNorm { state, tape: None }
    }

    /// True between a training forward pass and its backward.
    pub fn is_recording(&self) -> bool {
        self.tape.is_some()
    }

    pub fn cast<U: Element>(&self) -> BatchNorm<U> {
        BatchNorm { state: self.state.cast(), tape: None }
    }
}

pub(crate) fn visit_norm<T: Element>(st: &NormState<T>, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
    if st.affine {
        f(&join(prefix, "gamma"), &st.gamma);
        f(&join(prefix, "beta"), &st.beta);
    }
}

pub(crate) fn visit_norm_mut<T: Element>(st: &mut NormState<T>, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
    if st.affine {
        f(&join(prefix, "gamma"), &mut st.gamma);
        f(&join(prefix, "beta"), &mut st.beta);
    }
}

impl<T: Element> Layer<T> for BatchNorm<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.state.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels applied to {input}",
                self.state.channels()
            )));
        }
        Ok(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        bn_forward_infer(x, &self.state)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = bn_forward_train(x, &mut self.state)?;
        self.tape = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.tape.take().ok_or_else(|| unrecorded("batch norm"))?;
        bn_backward(dy, &cache, &mut self.state)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        visit_norm(&self.state, prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        visit_norm_mut(&mut self.state, prefix, f);
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relu<T: Element = f32> {
    tape: Option<Tensor<T>>,
}

impl<T: Element> Relu<T> {
    pub fn new() -> Self {
        Relu { tape: None }
    }
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

impl<T: Element> Layer<T> for Relu<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(x))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = relu(x);
        self.tape = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.tape.take().ok_or_else(|| unrecorded("relu"))?;
        dy.zip_map(&y, |d, o| if o > T::ZERO { d } else { T::ZERO })
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    tape: Option<(Shape, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool { kernel, stride, padding, tape: None }
    }

    fn pool<T: Element>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let out_shape = <Self as Layer<T>>::output_shape(self, x.shape())?;
        let s = x.shape();
        let mut out = Tensor::zeros(out_shape);
        let mut arg = Vec::with_capacity(out_shape.numel());
        let mut o = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.plane();
                let src = x.plane(n, c);
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let mut best: Option<(usize, T)> = None;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let i = iy as usize * s.w + ix as usize;
                                if best.map_or(true, |(_, b)| src[i] > b) {
                                    best = Some((i, src[i]));
                                }
                            }
                        }
                        let (i, v) = best.ok_or_else(|| Error::shape("pooling window entirely in padding"))?;
                        out.data_mut()[o] = v;
                        arg.push(base + i);
                        o += 1;
                    }
                }
            }
        }
        Ok((out, arg))
    }
}

impl<T: Element> Layer<T> for MaxPool {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.n,
            input.c,
            conv_out_size(input.h, self.kernel, self.stride, self.padding)?,
            conv_out_size(input.w, self.kernel, self.stride, self.padding)?,
        ))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.pool(x)?.0)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = self.pool(x)?;
        self.tape = Some((x.shape(), arg));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.tape.take().ok_or_else(|| unrecorded("max pool"))?;
        if arg.len() != dy.len() {
            return Err(Error::shape("max pool gradient does not match recorded output"));
        }
        let mut dx = Tensor::zeros(shape);
        for (&i, &d) in arg.iter().zip(dy.data()) {
            dx.data_mut()[i] += d;
        }
        Ok(dx)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalAvgPool {
    tape: Option<Shape>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { tape: None }
    }
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::ONE / T::from_usize(s.plane());
    let mut out = Tensor::zeros((s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[n * s.c + c] = x.plane(n, c).iter().copied().sum::<T>() * inv;
        }
    }
    out
}

impl<T: Element> Layer<T> for GlobalAvgPool {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(input.n, input.c, 1, 1))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(global_avg_pool(x))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.tape = Some(x.shape());
        Ok(global_avg_pool(x))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.tape.take().ok_or_else(|| unrecorded("global pool"))?;
        dy.expect_shape(Shape::new(s.n, s.c, 1, 1))?;
        let inv = T::ONE / T::from_usize(s.plane());
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let g = dy.data()[n * s.c + c] * inv;
                dx.plane_mut(n, c).fill(g);
            }
        }
        Ok(dx)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}

/// Fully connected layer on the flattened `c·h·w` features; output is `(n, out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    tape: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != 1 || ws.w != 1 || bias.len() != ws.n {
            return Err(Error::shape(format!("linear weight {ws} with bias of {}", bias.len())));
        }
        Ok(Linear {
            weight: Param::new(weight, ParamKind::Weight),
            bias: Param::new(bias.reshape((1, ws.n, 1, 1))?, ParamKind::Bias),
            tape: None,
        })
    }

    /// Normal(0, 1/in) weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let w = Tensor::gaussian((outputs, inputs, 1, 1), 0.0, (1.0 / inputs as f64).sqrt(), rng);
        Linear::new(w, Tensor::zeros((1, outputs, 1, 1))).expect("consistent shapes")
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn cast<U: Element>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast(), tape: None }
    }
}

/// `y = x·Wᵀ + b` on rows of an `(n, features)` matrix.
pub(crate) fn linear_rows<T: Element>(x: &[T], rows: usize, w: &Param<T>, b: &Param<T>) -> Vec<T> {
    let (out, inp) = (w.value.shape().n, w.value.shape().c);
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b.value.data());
    }
    T::gemm(rows, inp, out, T::ONE, x, (inp as isize, 1), w.value.data(), (1, inp as isize), T::ONE, &mut y, (out as isize, 1));
    y
}

/// Accumulates dW, db; returns dx rows.
pub(crate) fn linear_rows_backward<T: Element>(x: &[T], rows: usize, w: &mut Param<T>, b: &mut Param<T>, dy: &[T]) -> Vec<T> {
    let (out, inp) = (w.value.shape().n, w.value.shape().c);
    T::gemm(out, rows, inp, T::ONE, dy, (1, out as isize), x, (inp as isize, 1), T::ONE, w.grad.data_mut(), (inp as isize, 1));
    for r in 0..rows {
        for (g, &d) in b.grad.data_mut().iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *g += d;
        }
    }
    let mut dx = vec![T::ZERO; rows * inp];
    T::gemm(rows, out, inp, T::ONE, dy, (out as isize, 1), w.value.data(), (inp as isize, 1), T::ZERO, &mut dx, (inp as isize, 1));
    dx
}

pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let l = Linear::new(weight.clone(), bias.clone())?;
    l.infer(x)
}

impl<T: Element> Layer<T> for Linear<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let features = input.c * input.plane();
        if features != self.inputs() {
            return Err(Error::shape(format!(
                "linear layer expects {} features, got input {input}",
                self.inputs()
            )));
        }
        Ok(Shape::new(input.n, self.outputs(), 1, 1))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output_shape(x.shape())?;
        Tensor::from_vec(out, linear_rows(x.data(), out.n, &self.weight, &self.bias))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.tape = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.tape.take().ok_or_else(|| unrecorded("linear"))?;
        dy.expect_shape(self.output_shape(x.shape())?)?;
        let dx = linear_rows_backward(x.data(), x.shape().n, &mut self.weight, &mut self.bias, dy.data());
        Tensor::from_vec(x.shape(), dx)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        self.output_shape(input)?;
        Ok((input.n * self.inputs() * self.outputs()) as u64)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`; inference is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout<T: Element = f32> {
    pub rate: f64,
    pub rng: Rng,
    tape: Option<Tensor<T>>,
}

impl<T: Element> Dropout<T> {
    pub fn new(rate: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Dropout { rate, rng, tape: None })
    }

    pub fn cast<U: Element>(&self) -> Dropout<U> {
        Dropout { rate: self.rate, rng: self.rng.clone(), tape: None }
    }
}

pub fn dropout<T: Element>(x: &Tensor<T>, rate: f64, rng: &mut Rng, mode: crate::norm::Mode) -> Tensor<T> {
    match mode {
        crate::norm::Mode::Infer => x.clone(),
        crate::norm::Mode::Train => {
            let keep = T::from_f64(1.0 / (1.0 - rate));
            x.map(|v| if rng.bernoulli(rate) { T::ZERO } else { v * keep })
        }
    }
}

impl<T: Element> Layer<T> for Dropout<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mut mask = Tensor::zeros(x.shape());
        for m in mask.data_mut() {
            *m = if self.rng.bernoulli(self.rate) { T::ZERO } else { keep };
        }
        let y = x.zip_map(&mask, |a, b| a * b)?;
        self.tape = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.tape.take().ok_or_else(|| unrecorded("dropout"))?;
        dy.zip_map(&mask, |a, b| a * b)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}
