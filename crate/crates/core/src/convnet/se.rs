use crate::convnet::layers::{linear_rows, linear_rows_backward, Linear};
use crate::error::{Error, Result};
use crate::layer::{join, unrecorded, Layer};
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_SE_HIDDEN: usize = 200;

/// Squeeze-excite gate: global average pool, `c → hidden` linear + ReLU,
/// `hidden → c` linear + sigmoid, channelwise rescale of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite<T: Element = f32> {
    pub reduce: Linear<T>,
    pub expand: Linear<T>,
    tape: Option<SeTape<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct SeTape<T: Element> {
    x: Tensor<T>,
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
}

fn sigmoid<T: Element>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

impl<T: Element> SqueezeExcite<T> {
    pub fn init(channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 || channels == 0 {
            return Err(Error::config("squeeze-excite needs at least one channel and one hidden unit"));
        }
        Ok(SqueezeExcite {
            reduce: Linear::init(channels, hidden, rng),
            expand: Linear::init(hidden, channels, rng),
            tape: None,
        })
    }

    pub fn from_parts(reduce: Linear<T>, expand: Linear<T>) -> Result<Self> {
        if reduce.outputs() != expand.inputs() || reduce.inputs() != expand.outputs() {
            return Err(Error::shape("squeeze-excite linear layers do not chain"));
        }
        Ok(SqueezeExcite { reduce, expand, tape: None })
    }

    pub fn channels(&self) -> usize {
        self.reduce.inputs()
    }

    pub fn hidden(&self) -> usize {
        self.reduce.outputs()
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SeTape<T>)> {
        let s = self.output_shape(x.shape())?;
        let inv = T::ONE / T::from_usize(s.plane());
        let mut pooled = Vec::with_capacity(s.n * s.c);
        for n in 0..s.n {
            for c in 0..s.c {
                pooled.push(x.plane(n, c).iter().copied().sum::<T>() * inv);
            }
        }
        let hidden_pre = linear_rows(&pooled, s.n, &self.reduce.weight, &self.reduce.bias);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let gate: Vec<T> = linear_rows(&hidden, s.n, &self.expand.weight, &self.expand.bias)
            .into_iter()
            .map(sigmoid)
            .collect();
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let g = gate[n * s.c + c];
                y.plane_mut(n, c).iter_mut().for_each(|v| *v *= g);
            }
        }
        Ok((y, SeTape { x: x.clone(), pooled, hidden_pre, hidden, gate }))
    }

    pub fn cast<U: Element>(&self) -> SqueezeExcite<U> {
        SqueezeExcite { reduce: self.reduce.cast(), expand: self.expand.cast(), tape: None }
    }
}

/// One-shot squeeze-excite with freshly initialized weights.
pub fn squeeze_excite<T: Element>(x: &Tensor<T>, hidden: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    SqueezeExcite::init(x.shape().c, hidden, rng)?.infer(x)
}

impl<T: Element> Layer<T> for SqueezeExcite<T> {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels() {
            return Err(Error::shape(format!(
                "squeeze-excite over {} channels applied to {input}",
                self.channels()
            )));
        }
        Ok(input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, tape) = self.run(x)?;
        self.tape = Some(tape);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let t = self.tape.take().ok_or_else(|| unrecorded("squeeze-excite"))?;
        let s = t.x.shape();
        dy.expect_shape(s)?;
        let inv = T::ONE / T::from_usize(s.plane());
        // gate rows: d(loss)/d(pre-sigmoid)
        let mut dz = vec![T::ZERO; s.n * s.c];
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let i = n * s.c + c;
                let g = t.gate[i];
                let dgate: T = dy.plane(n, c).iter().zip(t.x.plane(n, c)).map(|(&d, &x)| d * x).sum();
                dz[i] = dgate * g * (T::ONE - g);
                for (o, &d) in dx.plane_mut(n, c).iter_mut().zip(dy.plane(n, c)) {
                    *o = d * g;
                }
            }
        }
        let mut dhidden = linear_rows_backward(&t.hidden, s.n, &mut self.expand.weight, &mut self.expand.bias, &dz);
        for (d, &pre) in dhidden.iter_mut().zip(&t.hidden_pre) {
            if pre <= T::ZERO {
                *d = T::ZERO;
            }
        }
        let dpooled = linear_rows_backward(&t.pooled, s.n, &mut self.reduce.weight, &mut self.reduce.bias, &dhidden);
        for n in 0..s.n {
            for c in 0..s.c {
                let d = dpooled[n * s.c + c] * inv;
                dx.plane_mut(n, c).iter_mut().for_each(|v| *v += d);
            }
        }
        Ok(dx)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce.visit_params(&join(prefix, "reduce"), f);
        self.expand.visit_params(&join(prefix, "expand"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce.visit_params_mut(&join(prefix, "reduce"), f);
        self.expand.visit_params_mut(&join(prefix, "expand"), f);
    }

    fn macs(&self, input: Shape) -> Result<u64> {
        self.output_shape(input)?;
        Ok((input.n * 2 * self.channels() * self.hidden()) as u64)
    }

    fn clear_tape(&mut self) {
        self.tape = None;
    }
}
