//! Small reverse-mode autodiff engine used by the kinema video models.
//!
//! Everything runs on `f64` CPU arrays (`ndarray::ArrayD`). A [`Tape`] records
//! one forward computation as a flat list of nodes; [`Tape::backward`] walks it
//! in reverse and returns per-node gradients. Model parameters live in a
//! [`nn::Params`] store keyed by name; loading a parameter onto a tape
//! registers the name so gradients can be fetched back by name after the pass.
//!
//! The op set is deliberately the one the video models need: elementwise math,
//! matmul / batched matmul, softmax, 3D convolution with zero or replicate
//! padding, nearest-neighbor upsampling, and group normalization.

pub mod conv;
pub mod io;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tape;

pub use conv::PadMode;
pub use nn::Params;
pub use tape::{Grads, Tape, Tensor};

/// Convenience alias for the dynamic-dimension arrays the engine works in.
pub type Arr = ndarray::ArrayD<f64>;
