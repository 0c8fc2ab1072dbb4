//! GAN generator inversion.
//!
//! Given a trained generator `G`, recover latent codes `z*` for target images
//! `x` by descending the pixelwise binary cross-entropy between `x` and
//! `G(z)`. The crate carries everything needed to do that end to end:
//!
//! - [`tensor`]: dense `f64` tensors and the numeric kernels (GEMM,
//!   convolution, upsampling, batch statistics).
//! - [`nn`]: layer/network definitions with forward evaluation and reverse
//!   passes for input and parameter gradients, including batch normalization
//!   in batch-statistics and stored-statistics modes.
//! - [`train`]: a small adversarial trainer and the Adam optimizer.
//! - [`inversion`]: latent recovery with clipping / statistics regularization,
//!   the reconstruction metric and the cross-sample gradient probe.
//! - [`io`]: weight files, architecture configs, IDX images, PGM grids, CSV.
//! - [`pipeline`]: the file-level workflows the command-line tool drives.

pub mod error;
pub mod inversion;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
