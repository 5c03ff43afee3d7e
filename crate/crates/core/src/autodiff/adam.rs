//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` given same-shaped `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Invalid("adam state was built for a different parameter set".into()));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every trainable parameter of `store`; parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let owned: Vec<Tensor<T>> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        let grad_refs: Vec<&Tensor<T>> = owned.iter().collect();
        let mut param_refs: Vec<&mut Tensor<T>> = store
            .iter_mut()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| &mut p.value)
            .collect();
        self.step(&mut param_refs, &grad_refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::new(&[3], vec![0.3, -4.0, 1e-3]).unwrap();
        let before = w.clone();
        let lr = 0.01;
        let mut state = AdamState::new(AdamConfig { lr, ..AdamConfig::default() });
        state.step(&mut [&mut w], &[&g]).unwrap();
        for ((a, b), g) in w.data().iter().zip(before.data()).zip(g.data()) {
            let expected = lr * g / (g.abs() + 1e-8);
            assert!(((b - a) - expected).abs() <= 1e-6 * lr);
            assert_eq!((b - a).signum(), g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = Tensor::new(&[2], vec![1.5f32, -0.25]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..50 {
            state.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert_eq!(w.data(), &[1.5, -0.25]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(AdamConfig::default());
        assert!(state.step(&mut [&mut w], &[&g]).is_err());
    }

    /// Scalar Adam written out independently of the tensor code.
    fn scalar_adam(w0: f64, lr: f64, steps: usize) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    #[test]
    fn minimizes_squared_norm() {
        let lr = 0.01;
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap(), true);
        let mut state = AdamState::new(AdamConfig { lr, ..AdamConfig::default() });
        for _ in 0..200 {
            let tape = Tape::new();
            let w = tape.param(&store, id);
            let loss = tape.sum(tape.mul(w, w).unwrap());
            let g = tape.backward(loss).unwrap();
            state.step_store(&mut store, &g).unwrap();
        }
        let w = store.get(id).data();
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert!(norm < 0.5 * 2f64.sqrt(), "norm {norm}");
        let oracle = scalar_adam(1.0, lr, 200);
        assert!((w[0] - oracle).abs() < 1e-12);
        assert!((w[1] - oracle).abs() < 1e-12);
    }
}
