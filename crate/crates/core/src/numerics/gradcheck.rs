//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Relative error with the floor used by every check in this crate.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the backward gradient of a scalar function at `point` with central
/// differences and returns the largest elementwise relative error.
pub fn finite_difference_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p);
        let y = f(&mut t, x)?;
        scalar_of(&t, y)
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same comparison for every parameter of a model. At most `max_per_param`
/// evenly spaced entries of each parameter are probed.
pub fn check_param_gradients<F>(store: &ParamStore, f: F, epsilon: f64, max_per_param: usize) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)?;
        tape.backward(y)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, p) in store.iter() {
        let n = p.value.numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
