//! Core algorithms for a small depth-camera navigation stack.
//!
//! Everything here is `no_std` with `alloc`: the depth-sensor wire codec, a
//! dense tensor engine with analytic gradients, the reference dual-head CNN,
//! dataset windowing, the trainer, INT8 post-training quantization with an
//! integer-only engine, evaluation metrics and Grad-CAM, and a deterministic
//! tank-drive simulator. File formats, the CLI and the teleop service live in
//! the `tinynav` crate.

#![cfg_attr(all(not(test), not(feature = "std")), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod protocol;
pub mod quant;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ControlCommand, FloatModel};
pub use protocol::{DepthFrame, SensorConfig};
