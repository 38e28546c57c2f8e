use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_: ()| -> Vec<Vec<S>> { store.iter().map(|(_, p)| vec![S::zero(); p.value.len()]).collect() };
        Self {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[S], &[S]) {
        (&self.first[index], &self.second[index])
    }

    /// Restores state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<S>>, second: Vec<Vec<S>>) -> Result<()> {
        let ok = first.len() == self.first.len()
            && second.len() == self.second.len()
            && first.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
            && second.iter().zip(&self.second).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Incompatible("optimizer moment shapes differ from the model".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let t = self.step as i32;
        let bc1 = S::one() - S::of(c.beta1.powi(t));
        let bc2 = S::one() - S::of(c.beta2.powi(t));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for (k, p) in store.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above").data();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
