//! Forward kernels and their explicit backward formulas.

mod conv;
mod elementwise;
mod norm;

pub use conv::{
    conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, conv_out_len,
    conv_transpose_out_len, ConvGeometry,
};
pub(crate) use elementwise::softmax_in_place;
pub use elementwise::{
    activation, activation_backward, add_elementwise, concat_channels, concat_channels_backward,
    sigmoid_scalar, softmax_lastdim, softmax_lastdim_backward, Activation,
};
pub use norm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, BatchStats, BnCache,
    RunningStats, BN_EPS, BN_MOMENTUM,
};

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
