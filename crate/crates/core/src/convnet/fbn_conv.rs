//! Convolution with fine-grained batch normalization, realized as a grouped
//! expansion convolution followed by per-intermediate-channel normalization
//! and a sum over groups.
//!
//! Input channels are split contiguously into `G` groups. Group `g` has its own
//! `(c_out, c_in_g, k, k)` kernel and produces intermediate channels
//! `[g·c_out, (g+1)·c_out)`, i.e. the partial sums `Σ_j w_gj·x_gj` of every
//! output neuron restricted to that group's inputs.

use crate::convnet::conv::{backward_block, conv_out_size, forward_block, Geometry};
use crate::convnet::layers::{visit_norm, visit_norm_mut};
use crate::error::{Error, Result};
use crate::layer::{join, unrecorded, Layer};
use crate::norm::{
    fbn_backward, fbn_forward_infer, fbn_forward_train, group_bounds, resolve_groups, GroupSpec, Mode,
    NormCache, NormState,
};
use crate::param::{Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FbnConvLayer<T: Element = f32> {
    /// One kernel per input-channel group, shape `(c_out, bounds[g+1] − bounds[g], k, k)`.
    pub weights: Vec<Param<T>>,
    pub bounds: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    /// Statistics over the `G·c_out` intermediate channels.
    pub norm: NormState<T>,
    pub group_spec: GroupSpec,
    tape: Option<(Tensor<T>, NormCache<T>)>,
}

impl<T: Element> FbnConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        group_spec: GroupSpec,
        affine: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let groups = resolve_groups(group_spec, c_in)?;
        let bounds = group_bounds(c_in, groups);
        // He init on the full fan-in: the summed pre-activation matches a plain conv.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let weights = bounds
            .windows(2)
            .map(|b| Param::new(Tensor::gaussian((c_out, b[1] - b[0], k, k), 0.0, std, rng), ParamKind::Weight))
            .collect();
        let layer = FbnConvLayer {
            weights,
            bounds,
            stride,
            padding,
            norm: NormState::new(groups * c_out, affine),
            group_spec,
            tape: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Builds a layer from explicit per-group kernels and normalization state.
    pub fn from_parts(
        weights: Vec<Tensor<T>>,
        stride: usize,
        padding: usize,
        norm: NormState<T>,
        group_spec: GroupSpec,
    ) -> Result<Self> {
        let mut bounds = vec![0];
        for w in &weights {
            bounds.push(bounds.last().copied().unwrap_or(0) + w.shape().c);
        }
        let layer = FbnConvLayer {
            weights: weights.into_iter().map(|w| Param::new(w, ParamKind::Weight)).collect(),
            bounds,
            stride,
            padding,
            norm,
            group_spec,
            tape: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.weights.len();
        if groups == 0 {
            return Err(Error::config("FBN conv needs at least one group"));
        }
        let first = self.weights[0].value.shape();
        for (g, w) in self.weights.iter().enumerate() {
            let s = w.value.shape();
            if s.n != first.n || s.h != first.h || s.w != first.w || s.h != s.w {
                return Err(Error::shape(format!("group {g} kernel {s} disagrees with group 0 kernel {first}")));
            }
            if s.c != self.bounds[g + 1] - self.bounds[g] {
                return Err(Error::shape(format!("group {g} kernel {s} does not match its channel range")));
            }
        }
        if self.norm.channels() != groups * first.n {
            return Err(Error::shape(format!(
                "FBN state has {} channels, expected G·c_out = {}",
                self.norm.channels(),
                groups * first.n
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        self.norm.validate()
    }

    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    pub fn c_in(&self) -> usize {
        *self.bounds.last().unwrap_or(&0)
    }

    pub fn c_out(&self) -> usize {
        self.weights[0].value.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weights[0].value.shape().h
    }

    /// The `(n, G·c_out, ho, wo)` intermediate tensor of per-group partial sums.
    pub fn expand(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != self.c_in() {
            return Err(Error::shape(format!("FBN conv expects {} input channels, got {s}", self.c_in())));
        }
        let g = Geometry::new(s, self.kernel(), self.stride, self.padding)?;
        let c_out = self.c_out();
        let plane = g.ho * g.wo;
        let mut out = Tensor::zeros((s.n, self.groups() * c_out, g.ho, g.wo));
        let mut col = Vec::new();
        for n in 0..s.n {
            let xs = x.sample(n);
            let os = out.sample_mut(n);
            for (grp, w) in self.weights.iter().enumerate() {
                let o = &mut os[grp * c_out * plane..(grp + 1) * c_out * plane];
                let cin = self.bounds[grp + 1] - self.bounds[grp];
                forward_block(xs, &g, self.bounds[grp], cin, w.value.data(), c_out, o, &mut col);
            }
        }
        Ok(out)
    }

    fn expand_backward(&mut self, x: &Tensor<T>, d_int: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let g = Geometry::new(s, self.kernel(), self.stride, self.padding)?;
        let c_out = self.c_out();
        let plane = g.ho * g.wo;
        let mut dx = Tensor::zeros(s);
        let mut col = Vec::new();
        for n in 0..s.n {
            let xs = x.sample(n);
            let ds = d_int.sample(n);
            let dxs = dx.sample_mut(n);
            for grp in 0..self.weights.len() {
                let cin = self.bounds[grp + 1] - self.bounds[grp];
                let lo = self.bounds[grp];
                let w = &mut self.weights[grp];
                let d = &ds[grp * c_out * plane..(grp + 1) * c_out * plane];
                backward_block(xs, &g, lo, cin, w.value.data(), c_out, d, w.grad.data_mut(), dxs, &mut col);
            }
        }
        Ok(dx)
    }

    /// Standardized intermediate values (pre-affine) from the last training forward pass.
    pub fn last_standardized(&self) -> Option<&Tensor<T>> {
        self.tape.as_ref().map(|(_, c)| &c.xhat)
    }

    pub fn is_recording(&self) -> bool {
        self.tape.is_some()
    }

    pub fn cast<U: Element>(&self) -> FbnConvLayer<U> {
        FbnConvLayer {
            weights: self.weights.iter().map(Param::cast).collect(),
            bounds: self.bounds.clone(),
            stride: self.stride,
            padding: self.padding,
            norm: self.norm.cast(),
            group_spec: self.group_spec,
            tape: None,
        }
    }
}

/// Runs the composite layer. Training mode uses batch statistics and updates
/// the running statistics; inference uses the frozen ones.
pub fn fbn_conv_forward<T: Element>(x: &Tensor<T>, layer: &mut FbnConvLayer<T>, mode: Mode) -> Result<Tensor<T>> {
    layer.forward(x, mode)
}

impl<T: Element> Layer<T> for FbnConvLayer<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return Err(Error::shape(format!("FBN conv expects {} input channels, got {input}", self.c_in())));
        }
        Ok(Shape::new(
            input.n,
            self.c_out(),
            conv_out_size(input.h, self.kernel(), self.stride, self.padding)?,
            conv_out_size(input.w, self.kernel(), self.stride, self.padding)?,
        ))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        fbn_forward_infer(&self.expand(x)?, &self.norm, self.groups())
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inter = self.expand(x)?;
        let groups = self.groups();
        let (y, cache) = fbn_forward_train(&inter, &mut self.norm, groups)?;
        self.tape = Some((x.clone(), cache));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, cache) = self.tape.take().ok_or_else(|| unrecorded("FBN conv"))?;
        let groups = self.groups();
        let d_int = fbn_backward(dy, &cache, &mut self.norm, groups)?;
        self.expand_backward(&x, &d_int)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (g, w) in self.weights.iter().enumerate() {
            f(&join(prefix, &format!("weight.{g}")), w);
        }
        visit_norm(&self.norm, &join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (g, w) in self.weights.iter_mut().enumerate() {
            f(&join(prefix, &format!("weight.{g}")), w);
        }
        visit_norm_mut(&mut self.norm, &join(prefix, "norm"), f);
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok((out.numel() * self.c_in() * self.kernel() * self.kernel()) as u64)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}
