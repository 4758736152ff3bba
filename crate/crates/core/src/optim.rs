use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with the store's entries and
    /// must hold a gradient for every trainable entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if !e.trainable {
                continue;
            }
            match g {
                None => return Err(Error::Contract(format!("missing gradient for {}", e.name))),
                Some(g) if g.shape() != e.value.shape() => {
                    return Err(Error::dim("adam", e.value.shape(), g.shape()));
                }
                _ => {}
            }
        }
        if self.first.is_empty() {
            self.first = params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let g = grads[i].as_ref().expect("checked above");
            let value = entry.value.data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..value.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w), true);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(1.25);
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(&mut s, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(s.flat_trainable(), vec![1.25]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1 g, v = 0.001 g^2; bias correction restores g and g^2, so the
        // step is lr * g / (|g| + eps).
        let (w0, g, lr) = (2.0, 0.5, 0.01);
        let mut s = scalar_store(w0);
        let mut adam = Adam::new(lr);
        adam.step(&mut s, &[Some(Tensor::scalar(g))]).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let expected = w0 - lr * (m / 0.1) / ((v / 0.001_f64).sqrt() + 1e-8);
        assert!((s.flat_trainable()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn scalar_descent_converges() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..50 {
            let w = s.flat_trainable()[0];
            adam.step(&mut s, &[Some(Tensor::scalar(2.0 * (w - 3.0)))]).unwrap();
        }
        assert!((s.flat_trainable()[0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn missing_gradient_is_a_contract_violation() {
        let mut s = scalar_store(0.0);
        let err = Adam::new(0.1).step(&mut s, &[None]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
