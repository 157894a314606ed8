//! Small reverse-mode autodiff engine with the layers of an encoder-decoder
//! segmentation network: convolution, batch norm, pooling, bilinear upsampling,
//! activations, dropout, channel concat, losses and the Adam optimizer.

pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Mode, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{he_uniform, ParamStore};
pub use tensor::{Float, Shape, Tensor};
