//! Dense tensors, reverse-mode differentiation, losses, Adam, and a
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_param_gradients, finite_difference_check, relative_error, DEFAULT_EPSILON};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter, INIT_STD};
pub use tape::{Gradients, Tape, Var, LOG_CLAMP, NORMALIZATION_TOL};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_in_place};

/// Softmax of a plain vector of finite values.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out).expect("softmax needs at least one finite value");
    out
}
