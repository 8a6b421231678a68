//! Minimal tensor autodiff used to train the segmentation network on CPU.

mod ops;
mod optim;
mod params;
mod tape;

pub use optim::{sgd_step, Adam};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};

/// `N×C×H×W` activations and parameters.
pub type Tensor = ndarray::Array4<f32>;

pub mod kernels {
    //! Raw kernels, exposed for benchmarking and reference checks.
    pub use super::ops::{concat_channels, conv2d, conv_transpose2x2, max_pool2x2};
}
