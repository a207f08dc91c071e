//! Dense `f64` tensor math with hand-derived backward passes.

mod batchnorm;
mod conv;
mod gradcheck;
mod ops;
mod param;
mod tensor;

pub use batchnorm::{
    batchnorm, batchnorm_backward, batchnorm_with_cache, BatchNorm, BnCache, Mode, NormLayout, RunningStats, BN_EPS,
    BN_MOMENTUM,
};
pub(crate) use conv::{backward_into as conv_backward_into, forward_into as conv_forward_into};
pub use conv::{conv2d, conv2d_backward, ConvGeometry};
pub use gradcheck::{finite_diff_grad, max_relative_error, FD_STEP, REL_ERR_FLOOR};
pub use ops::{global_avg_pool, global_avg_pool_backward, sigmoid, softmax};
pub(crate) use ops::{relu_backward_inplace, relu_inplace};
pub use param::{ParamRole, Parameter};
pub use tensor::Tensor;
