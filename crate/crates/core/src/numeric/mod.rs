//! Dense `f64` matrices, a reverse-mode tape, and the layers and losses the
//! model is assembled from.

mod gradcheck;
mod matrix;
mod nn;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use matrix::{row_softmax, sigmoid, softplus, Matrix};
pub use nn::{
    focal_loss_logits, focal_loss_probs, l1_loss, l1_loss_weighted, mlp_forward,
    sigmoid_focal_loss, Activation, Linear, Mlp, Norm,
};
pub use tape::{ParamId, ParamStore, Parameter, Tape, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}x{cols} matrix needs {} values, got {len}", rows * cols)]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("backward needs a 1x1 loss, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
}
