use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently held in `store`.
    /// Gradients are left untouched; call `zero_grad` before the next pass.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(self.first.len(), store.len(), "optimizer/parameter set mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            debug_assert_eq!(m.len(), p.value.numel());
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(0.0)).unwrap();
        store.get_mut(id).grad.data_mut()[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store);
        assert!((store.get(id).value.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![1.5, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.get(id).value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &store);
        let two = Tensor::scalar(-2.0);
        for _ in 0..1000 {
            store.zero_grad();
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let c = tape.constant(two.clone());
            let d = tape.add(p, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            tape.backward(sq, &mut store).unwrap();
            adam.step(&mut store);
        }
        let p = store.get(id).value.data()[0];
        assert!((p - 2.0).abs() < 1e-3, "p = {p}");
    }
}
