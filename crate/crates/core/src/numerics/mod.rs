//! Deterministic dense arrays, a reverse-mode tape, the handful of neural
//! layers the model needs, and Adam.

mod array;
mod gradcheck;
mod nn;
mod params;
mod tape;

use thiserror::Error;

pub use array::{gemm, Layout, NdArray};
pub use gradcheck::{finite_difference_check, FdConfig, FdReport, WorstElement};
pub use nn::{
    gru_cell_step, linear_forward, scaled_dot_attention, Dense, GruCell, Mlp, NormedDense,
    LAYER_NORM_EPS,
};
pub use params::{AdamConfig, ParamEntry, ParameterStore};
pub use tape::{Gradients, Tape, Var};

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced at {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Runs the reverse sweep from `loss` and adds `∂loss/∂θ` into the gradient
/// slot of every parameter the loss reaches. Other slots are untouched.
pub fn backward_gradients<T: Scalar>(
    tape: &Tape<T>,
    loss: Var,
    store: &mut ParameterStore<T>,
) -> Result<(), NumericsError> {
    if tape.is_empty() {
        return Err(NumericsError::Contract("backward on an empty tape".into()));
    }
    let grads = tape.backward(loss)?;
    store.accumulate_grads(&tape.param_grads(&grads))
}
