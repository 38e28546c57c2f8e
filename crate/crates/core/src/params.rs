use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a unique dotted name such as `fusion.rgb_block.q_proj.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Resets every gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    /// Drops all gradients; an optimizer step then reports them as missing.
    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor<S>)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone().reshape(p.value.shape()).expect("grad shape")),
            }
        }
    }

    /// Converts every parameter to another scalar type, keeping names and order.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

/// Parameter initializers. All draw from the caller's seeded RNG.
pub mod init {
    use super::*;

    /// Glorot-uniform `fan_in × fan_out` weight matrix.
    pub fn xavier<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, fan_in, fan_out, bound)
    }

    pub fn uniform<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<S> {
        Tensor::from_fn(rows, cols, |_, _| S::of(rng.gen_range(-bound..=bound)))
    }

    pub fn zeros<S: Scalar>(cols: usize) -> Tensor<S> {
        Tensor::zeros(&[1, cols])
    }

    pub fn zeros_matrix<S: Scalar>(rows: usize, cols: usize) -> Tensor<S> {
        Tensor::zeros(&[rows, cols])
    }

    pub fn ones<S: Scalar>(cols: usize) -> Tensor<S> {
        Tensor::full(&[1, cols], S::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.weight", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.add("a.weight", Tensor::zeros(&[1, 1])).is_err());
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn accumulate_sums_into_existing_grads() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[1, 2])).unwrap();
        let g = Tensor::row_vector(vec![1.0, 2.0]);
        store.accumulate(&[(id, g.clone())]);
        store.accumulate(&[(id, g)]);
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
    }
}
