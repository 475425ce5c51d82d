//! Sparse scan self-attention (S³A) and the SSViT model family, on CPU.

pub mod checks;
pub mod cli;
pub mod error;
pub mod io;
pub mod neighborhood;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod s3a;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use neighborhood::{NeighborhoodSpec, kernel_backward, kernel_forward};
pub use s3a::{S3AConfig, S3AParams, StridePolicy, s3a_backward, s3a_forward};
pub use tensor::{DType, Rng, Scalar, Tensor};
