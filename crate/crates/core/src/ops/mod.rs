//! Numeric kernels the network is assembled from.
//!
//! Every kernel accumulates in single precision in a fixed order, so results are
//! bit-stable regardless of how batch items are scheduled across threads. The
//! naive kernels in [`reference`] are the oracles the fast paths are tested against.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
pub mod reference;

pub use activation::{global_avg_pool, relu6, relu6_inplace};
pub use batchnorm::{fold_batchnorm, BatchNorm};
pub use conv::{conv2d, conv_output_size, ConvParams};
pub use linear::{linear, linear_backward, LinearGrad};
pub use loss::{softmax, softmax_xent};
