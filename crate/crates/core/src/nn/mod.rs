//! Non-attention building blocks of the backbone. Forward only, except for
//! the pointwise and depthwise primitives the S³A layer differentiates through.

pub mod act;
pub mod block;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod stem;

pub use act::gelu;
pub use block::{cpe, ffn, ssvit_block, BlockParams};
pub use conv::{conv2d, conv_out_side, depthwise_backward, depthwise_conv2d};
pub use linear::{pointwise, pointwise_backward};
pub use norm::{batchnorm_folded, layernorm, LN_EPS};
pub use stem::{downsample, stem, ConvBn, DownsampleParams, StemParams};
