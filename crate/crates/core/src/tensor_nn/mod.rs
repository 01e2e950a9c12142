//! Numeric substrate: tensors, random streams, forward primitives, the
//! reverse-mode [`Graph`], parameters, checkpoints and gradient checks.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
mod param;
mod rng;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_HEADER};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var, KL_PROB_FLOOR};
pub use layers::{Linear, Norm};
pub use ops::{conv2d, dropout_mask, gelu, layer_norm, linear, matmul, softmax_rows};
pub(crate) use param::join;
pub use param::{copy_params, Module, Parameter};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}
