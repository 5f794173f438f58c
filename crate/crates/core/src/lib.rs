//! 2-bit weight quantization by residual refinement.
//!
//! A weight group is approximated by `a1 * q1 + a2 * q2` with `q1, q2` sign
//! vectors: `q1, a1` solve the 1-bit problem on the weights, `q2, a2` solve it
//! on the remaining residual. Alongside the quantizer the crate ships a
//! round-to-nearest baseline, an addition-only GEMM over packed sign bits,
//! error and lattice-occupancy analysis, and a small quantization-aware
//! training harness with straight-through gradients and KL distillation.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod gemm;
pub mod io;
pub mod onebit;
pub mod qat;
pub mod r2q;
pub mod rtn;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use onebit::{BinaryKernel, SignBits};
pub use r2q::R2QTensor;
pub use rtn::RtnTensor;
pub use tensor::{GroupScheme, Matrix};
