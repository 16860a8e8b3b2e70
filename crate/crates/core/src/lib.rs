//! Fine-grained batch normalization (FBN), its exact folding into standard
//! convolution for inference, and the Finet light-weight architecture.
//!
//! The crate is a small self-contained deep-learning library: dense NCHW
//! tensors, layers with a training tape for reverse-mode gradients, BN/FBN,
//! a fusion pass that rewrites normalized convolutions into plain ones, Finet
//! builders with FLOP/parameter accounting, an SGD trainer, CIFAR ingestion,
//! and a binary checkpoint format.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod convnet;
pub mod data;
pub mod error;
pub mod finet;
pub mod fusion;
pub mod graph;
pub mod layer;
pub mod norm;
pub mod ops;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Item, NetMeta, Network, Node, Seq};
pub use layer::Layer;
pub use norm::{GroupSpec, Mode, NormState};
pub use rng::Rng;
pub use tensor::{Element, Fill, Shape, Tensor};
