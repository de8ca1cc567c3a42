//! 1-bit convolutional networks with learnable activation thresholds
//! (RSign / RPReLU), XNOR-popcount kernels, distributional distillation and
//! BOPs/FLOPs accounting.

pub mod activations;
pub mod arch;
pub mod bitkernel;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod inspect;
pub mod layers;
pub mod loss;
pub mod opscount;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{pack, unpack, BitTensor, FloatTensor};
