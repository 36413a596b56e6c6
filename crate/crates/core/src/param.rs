//! Named trainable parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Insertion-ordered set of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
        });
        Ok(ParamId(id))
    }

    /// Adds a tensor initialized uniformly in `±bound`, drawn from a stream
    /// keyed by `(seed, name)`.
    pub fn add_uniform(&mut self, name: &str, shape: Shape, bound: f64, seed: u64) -> Result<ParamId> {
        let mut rng = SplitMix64::derive_named(seed, name);
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.uniform(-bound, bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds the gradients of every parameter bound on `tape` into `.grad`.
    /// Parameters the loss never reached keep a zero contribution.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for (id, var) in tape.param_bindings() {
            if let Some(g) = tape.grad(var) {
                self.params[id.0].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Sum of squared gradient entries.
    pub fn grad_squared_norm(&self) -> T {
        self.params.iter().map(|p| p.grad.squared_norm()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(Shape::new(1, 1, 1, 2))).unwrap();
        assert!(s.add("a", Tensor::zeros(Shape::scalar())).is_err());
        s.add("b", Tensor::zeros(Shape::new(2, 3, 1, 1))).unwrap();
        assert_eq!(s.numel(), 8);
        assert_eq!(s.id_of("b"), Some(ParamId(1)));
    }

    #[test]
    fn uniform_init_is_bounded_and_keyed_by_name() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add_uniform("w.a", Shape::new(4, 4, 3, 3), 0.25, 9).unwrap();
        let b = s.add_uniform("w.b", Shape::new(4, 4, 3, 3), 0.25, 9).unwrap();
        assert!(s.get(a).value.data().iter().all(|v| v.abs() <= 0.25));
        assert_ne!(s.get(a).value, s.get(b).value);
        let mut t = ParamStore::<f64>::new();
        let a2 = t.add_uniform("w.a", Shape::new(4, 4, 3, 3), 0.25, 9).unwrap();
        assert_eq!(s.get(a).value, t.get(a2).value);
    }
}
