use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    /// Only conv and linear weights are decayed.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, kind }
    }

    pub fn zeros(shape: Shape, kind: ParamKind) -> Self {
        Param::new(Tensor::zeros(shape), kind)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    pub fn cast<U: Element>(&self) -> Param<U> {
        Param { value: self.value.cast(), grad: self.grad.cast(), kind: self.kind }
    }
}
