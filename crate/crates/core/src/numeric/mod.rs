//! Dense matrices, parameters and the reverse-mode tape.

pub mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use matrix::{
    column_mean, interpolate_rows, l1_of_means, l2_normalize_rows, matmul, mse, softmax_rows,
    Matrix, NORM_EPS,
};
pub use param::{ParamId, ParamSet, Parameter};
pub(crate) use param::join;
pub(crate) use tape::sigmoid;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
