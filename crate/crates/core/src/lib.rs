//! Neural style transfer steered by a pooled image-Laplacian loss.
//!
//! The stylized image minimises
//! `alpha * content + beta * style + sum_k gamma_k * laplacian_k`, where the
//! content and style terms come from VGG-19 activations and each Laplacian
//! term compares average-pooled image Laplacians of the output and the
//! content image directly in pixel space.

pub mod imageio;
pub mod loss;
pub mod net;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod weights;

pub mod cli;

pub use tensor::{Shape, Tensor};
