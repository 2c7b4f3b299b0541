//! Numeric core: layers with hand-derived gradients, the softmax head, SGD and
//! a finite-difference gradient checker.

mod activation;
mod conv;
pub mod gradcheck;
mod head;
mod optim;
mod pool;

pub use activation::{relu_backward, relu_forward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub(crate) use conv::conv2d_backward_params;
pub use gradcheck::{gradcheck, Fragment};
pub use head::{cross_entropy_loss, linear_softmax_backward, linear_softmax_forward, softmax};
pub use optim::{sgd_step, Sgd};
pub use pool::{
    gap_backward, gap_forward, gmp_backward, gmp_forward, maxpool2x2_backward, maxpool2x2_forward,
};

use crate::tensor::{Real, Tensor};

/// Gradients produced by a layer's backward pass. `params` follow the order of
/// the layer's parameters; `input` has the layer input's shape.
#[derive(Debug, Clone)]
pub struct LayerGrad<T: Real> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}
