//! Adam.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters whose gradient is `None` are left
/// untouched, including their moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    steps: Vec<u64>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            steps: vec![0; params.len()],
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "adam: gradient count");
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let p = params.tensors_mut()[i].data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for k in 0..p.len() {
                let g = grad.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Per-parameter step counts and moment estimates, for checkpointing.
    pub fn state(&self) -> (&[u64], &[Tensor], &[Tensor]) {
        (&self.steps, &self.first, &self.second)
    }

    pub fn restore(&mut self, steps: Vec<u64>, first: Vec<Tensor>, second: Vec<Tensor>) {
        assert_eq!(steps.len(), self.steps.len(), "adam restore: parameter count");
        assert_eq!(first.len(), self.first.len(), "adam restore: parameter count");
        assert_eq!(second.len(), self.second.len(), "adam restore: parameter count");
        self.steps = steps;
        self.first = first;
        self.second = second;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store);
        adam.step(&mut store, &[Some(Tensor::new(&[2], vec![3.0, -0.5]))]);
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-5);
        assert!((w[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn missing_gradient_leaves_parameter_alone() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1], vec![2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[None]);
        assert_eq!(store.tensors()[0].data(), &[2.0]);
        assert_eq!(adam.state().0, &[0]);
    }
}
