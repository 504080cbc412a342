//! Forward and backward kernels over plain tensors.
//!
//! Nothing here records a graph; [`Graph`](crate::Graph) wraps these
//! functions and stores what backward needs. All loops run in a fixed order
//! so results are bit-reproducible on a single thread.

pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod matmul;
pub mod norm;
pub mod softmax;

pub use conv::{conv2d, conv2d_backward, conv_output_extent, Conv2dParams};
pub use elementwise::{add, mul, reduce_to_shape, relu, scale, sigmoid};
pub use layout::{concat_channels, global_avg_pool, narrow_channels, sum_all, transpose_last2};
pub use matmul::{matmul, matmul_backward};
pub use norm::{batchnorm_infer, batchnorm_train, BatchNormTrain};
pub use softmax::{cross_entropy, softmax_backward, softmax_lastdim};
