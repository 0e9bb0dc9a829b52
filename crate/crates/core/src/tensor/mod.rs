//! Dense tensors, convolution kernels and reverse-mode autograd.

mod autograd;
mod conv;
mod element;
mod ops;
#[allow(clippy::module_inception)]
mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub(crate) use conv::conv_block_raw;
pub use conv::{
    conv2d_grouped, conv2d_pointwise, conv2d_standard, parallel_conv, ConvKind, ConvLayerSpec,
    MacCounter,
};
pub use element::Element;
pub use ops::{avg_pool2, global_avg_pool, linear, relu, softmax, softmax_cross_entropy};
pub use tensor::Tensor;
