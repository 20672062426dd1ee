//! Minimal neural-network engine: tensors flow through a fixed vocabulary of
//! layers with hand-written forward/backward passes, trained by momentum SGD.

pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod network;
pub mod optim;
pub mod pool;
pub mod softmax;

pub use batchnorm::{batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, BatchNormState};
pub use conv::{conv2d_backward, conv2d_forward, conv_out_dim};
pub use dropout::{dropout_backward, dropout_infer, dropout_train};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use linear::{linear_backward, linear_forward};
pub use network::{Gradients, LayerGrads, LayerSpec, LayerState, Mode, Network, Tape};
pub use optim::{sgd_step, OptimizerState};
pub use pool::{maxpool_backward, maxpool_forward, pool_out_dim};
pub use softmax::{softmax, softmax_cross_entropy};
