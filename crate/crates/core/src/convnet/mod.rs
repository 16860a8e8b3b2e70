//! Convolution family and the auxiliary layers used by Finet.

pub mod conv;
pub mod fbn_conv;
pub mod layers;
pub mod se;

pub use conv::{conv2d, conv2d_backward, conv_out_size, depthwise_conv2d, ConvParams};
pub use fbn_conv::{fbn_conv_forward, FbnConvLayer};
pub use layers::{
    dropout, global_avg_pool, linear, relu, BatchNorm, Conv2d, Dropout, FusionOrigin, GlobalAvgPool, Linear,
    MaxPool, Relu,
};
pub use se::{squeeze_excite, SqueezeExcite, DEFAULT_SE_HIDDEN};

use crate::error::Result;
use crate::layer::Layer;
use crate::tensor::{Element, Tensor};

/// Max pooling as a free function (no tape).
pub fn maxpool<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    Layer::<T>::infer(&MaxPool::new(kernel, stride, padding), x)
}
