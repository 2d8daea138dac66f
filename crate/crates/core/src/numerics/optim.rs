use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        store.require_grads()?;
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_mut().expect("checked above");
            let vals = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..vals.len() {
                let g = grad.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                vals[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::Tape;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]).unwrap());
        store.zero_grad();
        let before = store.iter().next().unwrap().1.value.clone();
        Adam::new(0.1).step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().1.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.5));
        store.zero_grad();
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        Adam::new(0.1).step(&mut store).unwrap();
        let moved = 0.5 - store.value(id).item();
        assert!((moved - 0.1).abs() < 1e-8, "{moved}");
        assert_eq!(store.get(id).grad.as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn descends_on_square() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.1);
        let mut prev = 1.0f64;
        for _ in 0..2 {
            store.zero_grad();
            let grads = {
                let mut tape = Tape::with_params(&store);
                let x = tape.param(id).unwrap();
                let y = tape.mul(x, x).unwrap();
                tape.backward(y).unwrap()
            };
            store.accumulate(&grads, 1.0);
            opt.step(&mut store).unwrap();
            let now = store.value(id).item().abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut store = ParamStore::new();
        store.add("orphan", Tensor::scalar(1.0));
        let err = Adam::new(0.1).step(&mut store).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "orphan"));
    }
}
