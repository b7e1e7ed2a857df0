//! Tensor arithmetic with reverse-mode automatic differentiation and the
//! layer set used by the encoders and mutual-information scorers.

pub mod gradcheck;
pub mod init;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;


pub use kernels::Padding;
pub use params::{Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-3;
/// Batch-norm running-statistics momentum (`running = m * running + (1 - m) * batch`).
pub const BN_MOMENTUM: f64 = 0.99;
