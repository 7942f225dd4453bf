//! Small single-precision tensor library with a tape-based autodiff graph.
//!
//! Only what convolutional image-to-image networks need: NCHW tensors,
//! strided 2-D convolution, ReLU, channel concatenation, nearest-neighbour
//! upsampling, clamping, the Gaussian reparameterisation and user-defined
//! scalar losses. Everything runs on one thread and is bit-reproducible.

mod conv;
mod graph;
mod tensor;

pub use conv::{conv2d, conv2d_backward, conv_out_size, ConvGrads};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use tensor::{Shape, Tensor};
