use crate::error::{Error, Result};
use crate::norm::Mode;
use crate::param::Param;
use crate::tensor::{Element, Shape, Tensor};

/// Common interface of every node in a network.
///
/// `forward_train` records whatever its `backward` needs (the tape); `infer`
/// borrows immutably and records nothing.
pub trait Layer<T: Element> {
    fn output_shape(&self, input: Shape) -> Result<Shape>;

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Consumes the tape, accumulates parameter gradients, returns dx.
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}

    /// Multiply-accumulate count of one inference pass on `input`.
    fn macs(&self, _input: Shape) -> Result<u64> {
        Ok(0)
    }

    fn clear_tape(&mut self);

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Infer => self.infer(x),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn unrecorded(what: &str) -> Error {
    Error::State(format!("{what}: backward called without a recorded training forward pass"))
}
