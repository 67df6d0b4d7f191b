//! Value-level kernels behind the tape operations.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod resize;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use norm::{
    batchnorm_eval_forward, batchnorm_train_backward_input, batchnorm_train_forward, BatchStats, BN_EPSILON,
    BN_MOMENTUM,
};
pub use pointwise::{
    concat_channels_forward, dropout_mask, relu_backward, relu_forward, softmax_channels_backward,
    softmax_channels_forward, DropoutKey,
};
pub use pool::{
    adaptive_avg_pool2d_backward, adaptive_avg_pool2d_forward, maxpool2d_backward, maxpool2d_forward, PoolSpec,
};
pub use resize::{bilinear_resize_backward, bilinear_resize_forward, nearest_resize};
