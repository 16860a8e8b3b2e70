//! Network graphs: ordered, named layer lists with residual and two-branch
//! composites. This is the unit the fusion pass rewrites and the checkpoint
//! format stores.

use std::collections::BTreeMap;

use crate::convnet::{
    BatchNorm, Conv2d, Dropout, FbnConvLayer, GlobalAvgPool, Linear, MaxPool, Relu, SqueezeExcite,
};
use crate::error::{Error, Result};
use crate::layer::{join, Layer};
use crate::norm::{GroupSpec, Mode, NormState};
use crate::ops::{channel_shuffle, concat_channels, slice_channels};
use crate::param::Param;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T: Element = f32> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    FbnConv(FbnConvLayer<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool),
    GlobalAvgPool(GlobalAvgPool),
    Linear(Linear<T>),
    Dropout(Dropout<T>),
    SqueezeExcite(SqueezeExcite<T>),
    /// A nested, named sub-sequence.
    Seq(Seq<T>),
    /// `y = x + body(x)`.
    Residual(Seq<T>),
    Branches(Branches<T>),
    ChannelShuffle(ChannelShuffle),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item<T: Element = f32> {
    pub name: String,
    pub node: Node<T>,
}

impl<T: Element> Item<T> {
    pub fn new(name: impl Into<String>, node: Node<T>) -> Self {
        Item { name: name.into(), node }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Seq<T: Element = f32> {
    pub items: Vec<Item<T>>,
}

impl<T: Element> Seq<T> {
    pub fn new(items: Vec<Item<T>>) -> Self {
        Seq { items }
    }

    pub fn push(&mut self, name: impl Into<String>, node: Node<T>) {
        self.items.push(Item::new(name, node));
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Two parallel branches whose outputs are concatenated along channels.
///
/// With `split` the input is halved along channels and each branch sees its
/// own half; otherwise both branches see the whole input. An empty branch is
/// the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Branches<T: Element = f32> {
    pub split: bool,
    pub left: Seq<T>,
    pub right: Seq<T>,
    tape: Option<(usize, usize)>,
}

impl<T: Element> Branches<T> {
    pub fn new(split: bool, left: Seq<T>, right: Seq<T>) -> Self {
        Branches { split, left, right, tape: None }
    }

    fn inputs(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = x.shape().c;
        if self.split {
            if c % 2 != 0 {
                return Err(Error::shape(format!("cannot split {c} channels in half")));
            }
            Ok((slice_channels(x, 0, c / 2)?, slice_channels(x, c / 2, c)?))
        } else {
            Ok((x.clone(), x.clone()))
        }
    }

    fn input_shapes(&self, input: Shape) -> Result<(Shape, Shape)> {
        if self.split {
            if input.c % 2 != 0 {
                return Err(Error::shape(format!("cannot split {} channels in half", input.c)));
            }
            let half = Shape::new(input.n, input.c / 2, input.h, input.w);
            Ok((half, half))
        } else {
            Ok((input, input))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelShuffle {
    pub groups: usize,
}

impl<T: Element> Layer<T> for ChannelShuffle {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.groups == 0 || input.c % self.groups != 0 {
            return Err(Error::shape(format!("{} shuffle groups for {input}", self.groups)));
        }
        Ok(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        channel_shuffle(x, self.groups)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        channel_shuffle(x, self.groups)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        channel_shuffle(dy, dy.shape().c / self.groups)
    }

    fn clear_tape(&mut self) {}
}

impl<T: Element> Layer<T> for Seq<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.items.iter().try_fold(input, |s, it| {
            it.node.output_shape(s).map_err(|e| annotate(e, &it.name))
        })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for it in &self.items {
            cur = it.node.infer(&cur).map_err(|e| annotate(e, &it.name))?;
        }
        Ok(cur)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for it in &mut self.items {
            cur = it.node.forward_train(&cur).map_err(|e| annotate(e, &it.name))?;
        }
        Ok(cur)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = dy.clone();
        for it in self.items.iter_mut().rev() {
            cur = it.node.backward(&cur).map_err(|e| annotate(e, &it.name))?;
        }
        Ok(cur)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for it in &self.items {
            it.node.visit_params(&join(prefix, &it.name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for it in &mut self.items {
            it.node.visit_params_mut(&join(prefix, &it.name), f);
        }
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        let mut shape = input;
        let mut total = 0;
        for it in &self.items {
            total += it.node.macs(shape)?;
            shape = it.node.output_shape(shape)?;
        }
        Ok(total)
    }

    fn clear_tape(&mut self) {
        self.items.iter_mut().for_each(|it| it.node.clear_tape());
    }
}

fn annotate(e: Error, name: &str) -> Error {
    match e {
        Error::Shape(m) if !m.starts_with('[') => Error::Shape(format!("[{name}] {m}")),
        other => other,
    }
}

impl<T: Element> Layer<T> for Branches<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (a, b) = self.input_shapes(input)?;
        let (oa, ob) = (self.left.output_shape(a)?, self.right.output_shape(b)?);
        if oa.h != ob.h || oa.w != ob.w {
            return Err(Error::shape(format!("branch outputs {oa} and {ob} cannot be concatenated")));
        }
        Ok(Shape::new(input.n, oa.c + ob.c, oa.h, oa.w))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = self.inputs(x)?;
        concat_channels(&self.left.infer(&a)?, &self.right.infer(&b)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = self.inputs(x)?;
        let ya = self.left.forward_train(&a)?;
        let yb = self.right.forward_train(&b)?;
        self.tape = Some((ya.shape().c, x.shape().c));
        concat_channels(&ya, &yb)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (left_c, _) = self.tape.take().ok_or_else(|| crate::layer::unrecorded("branches"))?;
        let c = dy.shape().c;
        let da = self.left.backward(&slice_channels(dy, 0, left_c)?)?;
        let db = self.right.backward(&slice_channels(dy, left_c, c)?)?;
        if self.split {
            concat_channels(&da, &db)
        } else {
            da.add(&db)
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.left.visit_params(&join(prefix, "left"), f);
        self.right.visit_params(&join(prefix, "right"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.left.visit_params_mut(&join(prefix, "left"), f);
        self.right.visit_params_mut(&join(prefix, "right"), f);
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        let (a, b) = self.input_shapes(input)?;
        Ok(self.left.macs(a)? + self.right.macs(b)?)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
        self.left.clear_tape();
        self.right.clear_tape();
    }
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $e:expr, residual $r:ident => $re:expr) => {
        match $self {
            Node::Conv($l) => $e,
            Node::BatchNorm($l) => $e,
            Node::FbnConv($l) => $e,
            Node::Relu($l) => $e,
            Node::MaxPool($l) => $e,
            Node::GlobalAvgPool($l) => $e,
            Node::Linear($l) => $e,
            Node::Dropout($l) => $e,
            Node::SqueezeExcite($l) => $e,
            Node::Branches($l) => $e,
            Node::Seq($l) => $e,
            Node::ChannelShuffle($l) => $e,
            Node::Residual($r) => $re,
        }
    };
}

impl<T: Element> Layer<T> for Node<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        dispatch!(self, l => Layer::<T>::output_shape(l, input), residual body => {
            let out = body.output_shape(input)?;
            if out != input {
                return Err(Error::shape(format!("residual body maps {input} to {out}")));
            }
            Ok(out)
        })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => Layer::<T>::infer(l, x), residual body => body.infer(x)?.add(x))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => Layer::<T>::forward_train(l, x), residual body => body.forward_train(x)?.add(x))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => Layer::<T>::backward(l, dy), residual body => body.backward(dy)?.add(dy))
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        dispatch!(self, l => Layer::<T>::visit_params(l, prefix, f), residual body => body.visit_params(prefix, f))
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        dispatch!(self, l => Layer::<T>::visit_params_mut(l, prefix, f), residual body => body.visit_params_mut(prefix, f))
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        dispatch!(self, l => Layer::<T>::macs(l, input), residual body => body.macs(input))
    }

    fn clear_tape(&mut self) {
        dispatch!(self, l => Layer::<T>::clear_tape(l), residual body => body.clear_tape())
    }
}

impl<T: Element> Node<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Node::Conv(_) => "conv",
            Node::BatchNorm(_) => "batch_norm",
            Node::FbnConv(_) => "fbn_conv",
            Node::Relu(_) => "relu",
            Node::MaxPool(_) => "max_pool",
            Node::GlobalAvgPool(_) => "global_pool",
            Node::Linear(_) => "linear",
            Node::Dropout(_) => "dropout",
            Node::SqueezeExcite(_) => "squeeze_excite",
            Node::Seq(_) => "seq",
            Node::Residual(_) => "residual",
            Node::Branches(_) => "branches",
            Node::ChannelShuffle(_) => "channel_shuffle",
        }
    }

    pub fn cast<U: Element>(&self) -> Node<U> {
        match self {
            Node::Conv(l) => Node::Conv(l.cast()),
            Node::BatchNorm(l) => Node::BatchNorm(l.cast()),
            Node::FbnConv(l) => Node::FbnConv(l.cast()),
            Node::Relu(_) => Node::Relu(Relu::new()),
            Node::MaxPool(p) => Node::MaxPool(MaxPool::new(p.kernel, p.stride, p.padding)),
            Node::GlobalAvgPool(_) => Node::GlobalAvgPool(GlobalAvgPool::new()),
            Node::Linear(l) => Node::Linear(l.cast()),
            Node::Dropout(l) => Node::Dropout(l.cast()),
            Node::SqueezeExcite(l) => Node::SqueezeExcite(l.cast()),
            Node::Seq(body) => Node::Seq(body.cast()),
            Node::Residual(body) => Node::Residual(body.cast()),
            Node::Branches(b) => Node::Branches(Branches::new(b.split, b.left.cast(), b.right.cast())),
            Node::ChannelShuffle(s) => Node::ChannelShuffle(s.clone()),
        }
    }
}

impl<T: Element> Seq<T> {
    pub fn cast<U: Element>(&self) -> Seq<U> {
        Seq { items: self.items.iter().map(|it| Item::new(it.name.clone(), it.node.cast())).collect() }
    }

    /// Calls `f` on every normalization state, depth first.
    pub fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut NormState<T>)) {
        for it in &mut self.items {
            match &mut it.node {
                Node::BatchNorm(b) => f(&mut b.state),
                Node::FbnConv(l) => f(&mut l.norm),
                Node::Seq(s) | Node::Residual(s) => s.visit_norms_mut(f),
                Node::Branches(b) => {
                    b.left.visit_norms_mut(f);
                    b.right.visit_norms_mut(f);
                }
                _ => {}
            }
        }
    }
}

/// Descriptive metadata carried alongside a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetMeta {
    pub name: String,
    pub group_spec: GroupSpec,
    pub use_se: bool,
    /// Expected (channels, height, width) of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
}

impl Default for NetMeta {
    fn default() -> Self {
        NetMeta { name: "custom".into(), group_spec: GroupSpec::default(), use_se: false, input: (3, 32, 32), classes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Element = f32> {
    pub body: Seq<T>,
    pub meta: NetMeta,
    pub mode: Mode,
    recorded: bool,
}

impl<T: Element> Network<T> {
    pub fn new(body: Seq<T>, meta: NetMeta) -> Self {
        Network { body, meta, mode: Mode::Train, recorded: false }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Infer {
            self.body.clear_tape();
            self.recorded = false;
        }
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let (c, h, w) = self.meta.input;
        Shape::new(batch, c, h, w)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.body.output_shape(input)
    }

    /// Runs in the network's current mode. Training mode records the tape.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mode {
            Mode::Train => {
                let y = self.body.forward_train(x)?;
                self.recorded = true;
                Ok(y)
            }
            Mode::Infer => self.body.infer(x),
        }
    }

    /// Replaces every running statistic with the batch statistics of `x`, as
    /// seen by a training-mode pass. Parameters are untouched (dropout streams
    /// do advance) and the mode is
    /// restored. Gives a freshly initialized network the inference behaviour
    /// of a trained one.
    pub fn calibrate_statistics(&mut self, x: &Tensor<T>) -> Result<()> {
        let mut saved = Vec::new();
        self.body.visit_norms_mut(&mut |st| {
            saved.push(st.momentum);
            st.momentum = 1.0;
        });
        let result = self.body.forward_train(x);
        let mut it = saved.into_iter();
        self.body.visit_norms_mut(&mut |st| st.momentum = it.next().expect("same traversal"));
        self.body.clear_tape();
        self.recorded = false;
        result.map(|_| ())
    }

    /// Inference pass; never mutates the network.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.body.infer(x)
    }

    /// Inference outputs of every top-level node, in order.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(self.body.items.len());
        for it in &self.body.items {
            cur = it.node.infer(&cur).map_err(|e| annotate(e, &it.name))?;
            out.push((it.name.clone(), cur.clone()));
        }
        Ok(out)
    }

    /// Backpropagates `dy` (gradient w.r.t. the output of the last forward) and
    /// returns the gradient w.r.t. the input.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.mode != Mode::Train || !self.recorded {
            return Err(Error::State("no recorded training forward pass to differentiate".into()));
        }
        self.recorded = false;
        self.body.backward(dy)
    }

    pub fn zero_grad(&mut self) {
        self.body.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit_params("", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_params_mut("", f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                found = Some(p.value.clone());
            }
        });
        found
    }

    /// Runs `f` on the named parameter's value; false when absent.
    pub fn with_param_mut(&mut self, name: &str, f: &mut dyn FnMut(&mut Tensor<T>)) -> bool {
        let mut hit = false;
        self.visit_params_mut(&mut |n, p| {
            if n == name {
                f(&mut p.value);
                hit = true;
            }
        });
        hit
    }

    pub fn gradients(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |n, p| {
            out.insert(n.to_string(), p.grad.clone());
        });
        out
    }

    /// Trainable parameter count (conv/linear weights and biases, affine γ/β).
    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.value.len());
        total
    }

    pub fn macs(&self, input: Shape) -> Result<u64> {
        self.body.macs(input)
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network { body: self.body.cast(), meta: self.meta.clone(), mode: self.mode, recorded: false }
    }

    pub fn find(&self, name: &str) -> Option<&Node<T>> {
        fn walk<'a, T: Element>(seq: &'a Seq<T>, prefix: &str, name: &str) -> Option<&'a Node<T>> {
            for it in &seq.items {
                let full = join(prefix, &it.name);
                if full == name {
                    return Some(&it.node);
                }
                let hit = match &it.node {
                    Node::Residual(b) | Node::Seq(b) => walk(b, &full, name),
                    Node::Branches(b) => {
                        walk(&b.left, &join(&full, "left"), name).or_else(|| walk(&b.right, &join(&full, "right"), name))
                    }
                    _ => None,
                };
                if hit.is_some() {
                    return hit;
                }
            }
            None
        }
        walk(&self.body, "", name)
    }
}

impl<T: Element> Layer<T> for Network<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.body.output_shape(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.body.infer(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.body.forward_train(x)?;
        self.recorded = true;
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.recorded {
            return Err(crate::layer::unrecorded("network"));
        }
        self.recorded = false;
        self.body.backward(dy)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_params_mut(prefix, f);
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        self.body.macs(input)
    }

    fn clear_tape(&mut self) {
        self.recorded = false;
        self.body.clear_tape();
    }
}
