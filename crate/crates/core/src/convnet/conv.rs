//! Cross-correlation with stride, zero padding and channel groups.
//!
//! General groups go through im2col + GEMM; the depthwise case (one input and
//! one output channel per group) uses direct loops.

use crate::error::{Error, Result};
use crate::param::{Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

/// Spatial geometry shared by forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::shape("kernel and stride must be >= 1"));
    }
    if size + 2 * pad < k {
        return Err(Error::shape(format!("kernel {k} larger than padded input {}", size + 2 * pad)));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

impl Geometry {
    pub fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Geometry {
            h: input.h,
            w: input.w,
            k,
            stride,
            pad,
            ho: conv_out_size(input.h, k, stride, pad)?,
            wo: conv_out_size(input.w, k, stride, pad)?,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds channels `[ch_lo, ch_lo + cin)` of one sample into a
/// `(cin·k·k) × (ho·wo)` matrix.
fn im2col<T: Element>(x: &[T], g: &Geometry, ch_lo: usize, cin: usize, col: &mut Vec<T>) {
    let p = g.positions();
    col.clear();
    col.resize(cin * g.k * g.k * p, T::ZERO);
    let plane = g.h * g.w;
    for ci in 0..cin {
        let src = &x[(ch_lo + ci) * plane..(ch_lo + ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adds a column matrix back into the image gradient.
fn col2im<T: Element>(col: &[T], g: &Geometry, ch_lo: usize, cin: usize, dx: &mut [T]) {
    let p = g.positions();
    let plane = g.h * g.w;
    for ci in 0..cin {
        let dst = &mut dx[(ch_lo + ci) * plane..(ch_lo + ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out (cout × P) = weight (cout × cin·k²) · cols(x[ch_lo..ch_lo+cin])`.
pub(crate) fn forward_block<T: Element>(
    x: &[T],
    g: &Geometry,
    ch_lo: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    out: &mut [T],
    col: &mut Vec<T>,
) {
    let kk = cin * g.k * g.k;
    let p = g.positions();
    let b: &[T] = if g.is_pointwise() {
        &x[ch_lo * p..(ch_lo + cin) * p]
    } else {
        im2col(x, g, ch_lo, cin, col);
        col
    };
    T::gemm(cout, kk, p, T::ONE, weight, (kk as isize, 1), b, (p as isize, 1), T::ZERO, out, (p as isize, 1));
}

/// Accumulates `dweight += dy·colsᵀ` and `dx += col2im(weightᵀ·dy)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_block<T: Element>(
    x: &[T],
    g: &Geometry,
    ch_lo: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    dy: &[T],
    dweight: &mut [T],
    dx: &mut [T],
    col: &mut Vec<T>,
) {
    let kk = cin * g.k * g.k;
    let p = g.positions();
    if g.is_pointwise() {
        let xs = &x[ch_lo * p..(ch_lo + cin) * p];
        T::gemm(cout, p, kk, T::ONE, dy, (p as isize, 1), xs, (1, p as isize), T::ONE, dweight, (kk as isize, 1));
        let dxs = &mut dx[ch_lo * p..(ch_lo + cin) * p];
        T::gemm(kk, cout, p, T::ONE, weight, (1, kk as isize), dy, (p as isize, 1), T::ONE, dxs, (p as isize, 1));
        return;
    }
    im2col(x, g, ch_lo, cin, col);
    T::gemm(cout, p, kk, T::ONE, dy, (p as isize, 1), col, (1, p as isize), T::ONE, dweight, (kk as isize, 1));
    let mut dcol = vec![T::ZERO; kk * p];
    T::gemm(kk, cout, p, T::ONE, weight, (1, kk as isize), dy, (p as isize, 1), T::ZERO, &mut dcol, (p as isize, 1));
    col2im(&dcol, g, ch_lo, cin, dx);
}

fn depthwise_forward_plane<T: Element>(src: &[T], g: &Geometry, kernel: &[T], dst: &mut [T]) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let mut acc = T::ZERO;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        acc += kernel[ky * g.k + kx] * src[iy as usize * g.w + ix as usize];
                    }
                }
            }
            dst[oy * g.wo + ox] = acc;
        }
    }
}

fn depthwise_backward_plane<T: Element>(
    src: &[T],
    g: &Geometry,
    kernel: &[T],
    dy: &[T],
    dkernel: &mut [T],
    dsrc: &mut [T],
) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let d = dy[oy * g.wo + ox];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        let i = iy as usize * g.w + ix as usize;
                        dkernel[ky * g.k + kx] += d * src[i];
                        dsrc[i] += d * kernel[ky * g.k + kx];
                    }
                }
            }
        }
    }
}

/// Weight `(c_out, c_in/groups, k, k)`, optional bias `(1, c_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Element = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let p = ConvParams {
            weight: Param::new(weight, ParamKind::Weight),
            bias: bias.map(|b| Param::new(b, ParamKind::Bias)),
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// He-normal initialized weights, no bias.
    pub fn init(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, groups: usize, rng: &mut Rng) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::config(format!("{groups} groups must divide {c_in} inputs and {c_out} outputs")));
        }
        let fan_in = (c_in / groups) * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::gaussian((c_out, c_in / groups, k, k), 0.0, std, rng);
        ConvParams::new(w, None, stride, padding, groups)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.value.shape();
        if s.h != s.w || s.h == 0 {
            return Err(Error::config(format!("kernel must be square, got {s}")));
        }
        if self.stride == 0 || self.groups == 0 || s.n % self.groups != 0 {
            return Err(Error::config(format!(
                "invalid conv: weight {s}, stride {}, groups {}",
                self.stride, self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.value.len() != s.n {
                return Err(Error::shape(format!("bias of {} for {} output channels", b.value.len(), s.n)));
            }
        }
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape().c * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape().h
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.c_in() == self.groups && self.c_out() == self.groups
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got input {input}",
                self.c_in()
            )));
        }
        let g = Geometry::new(input, self.kernel(), self.stride, self.padding)?;
        Ok(Shape::new(input.n, self.c_out(), g.ho, g.wo))
    }

    /// Multiply-accumulates for one forward pass (bias adds not counted).
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        let per = (self.c_in() / self.groups) * self.kernel() * self.kernel();
        Ok((out.numel() * per) as u64)
    }

    pub fn cast<U: Element>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let out_shape = p.output_shape(x.shape())?;
    let g = Geometry::new(x.shape(), p.kernel(), p.stride, p.padding)?;
    let (cin_g, cout_g) = (p.c_in() / p.groups, p.c_out() / p.groups);
    let wlen = cin_g * p.kernel() * p.kernel();
    let weight = p.weight.value.data();
    let mut out = Tensor::zeros(out_shape);
    let plane = g.positions();
    let mut col = Vec::new();
    for n in 0..out_shape.n {
        let xs = x.sample(n);
        let os = out.sample_mut(n);
        for grp in 0..p.groups {
            let w = &weight[grp * cout_g * wlen..(grp + 1) * cout_g * wlen];
            let o = &mut os[grp * cout_g * plane..(grp + 1) * cout_g * plane];
            if cin_g == 1 && cout_g == 1 {
                depthwise_forward_plane(&xs[grp * g.h * g.w..(grp + 1) * g.h * g.w], &g, w, o);
            } else {
                forward_block(xs, &g, grp * cin_g, cin_g, w, cout_g, o, &mut col);
            }
        }
        if let Some(b) = &p.bias {
            for (c, &bv) in b.value.data().iter().enumerate() {
                os[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Depthwise convolution: requires `groups == c_in == c_out`.
pub fn depthwise_conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    if !(p.groups == p.c_in() && p.groups == p.c_out() && p.groups == x.shape().c) {
        return Err(Error::shape(format!(
            "depthwise conv needs groups == c_in == c_out, got groups {} c_in {} c_out {}",
            p.groups,
            p.c_in(),
            p.c_out()
        )));
    }
    conv2d(x, p)
}

/// Accumulates weight and bias gradients into `p` and returns dx.
pub fn conv2d_backward<T: Element>(x: &Tensor<T>, p: &mut ConvParams<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = p.output_shape(x.shape())?;
    dy.expect_shape(out_shape)?;
    let g = Geometry::new(x.shape(), p.kernel(), p.stride, p.padding)?;
    let (cin_g, cout_g) = (p.c_in() / p.groups, p.c_out() / p.groups);
    let wlen = cin_g * p.kernel() * p.kernel();
    let plane = g.positions();
    let mut dx = Tensor::zeros(x.shape());
    let mut col = Vec::new();
    let ConvParams { weight, bias, groups, .. } = p;
    let wv = weight.value.data();
    let wg = weight.grad.data_mut();
    for n in 0..out_shape.n {
        let xs = x.sample(n);
        let dys = dy.sample(n);
        let dxs = dx.sample_mut(n);
        for grp in 0..*groups {
            let wr = grp * cout_g * wlen..(grp + 1) * cout_g * wlen;
            let d = &dys[grp * cout_g * plane..(grp + 1) * cout_g * plane];
            if cin_g == 1 && cout_g == 1 {
                let pr = grp * g.h * g.w..(grp + 1) * g.h * g.w;
                depthwise_backward_plane(&xs[pr.clone()], &g, &wv[wr.clone()], d, &mut wg[wr], &mut dxs[pr]);
            } else {
                backward_block(xs, &g, grp * cin_g, cin_g, &wv[wr.clone()], cout_g, d, &mut wg[wr], dxs, &mut col);
            }
        }
        if let Some(b) = bias {
            for (c, bg) in b.grad.data_mut().iter_mut().enumerate() {
                *bg += dys[c * plane..(c + 1) * plane].iter().copied().sum();
            }
        }
    }
    Ok(dx)
}
