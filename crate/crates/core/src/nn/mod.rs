//! Minimal feed-forward network substrate: dense, convolution, transposed
//! convolution, pooling and activations with hand-written backward passes.

mod adam;
mod layers;
mod network;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use layers::{sigmoid, Layer};
pub use network::{Gradients, Network, Trace};
pub use scalar::Scalar;
pub use tensor::Tensor;
