//! Reverse-mode differentiation over 4-D tensors and the layers the
//! forecaster is built from.

mod graph;
mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use graph::{sigmoid, Graph, Padding, Var};
pub use kernels::Interp;
pub use layers::{ssim, Cbam, Conv, ConvLstmCell, ConvTranspose, LstmState};
pub use params::{AdamConfig, ParamId, ParamStore, Parameter};
pub use tensor::Tensor4;
