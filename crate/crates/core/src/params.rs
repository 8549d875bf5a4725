use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, uniquely-named set of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. leaves created by a caller.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a fresh name.
    ///
    /// # Panics
    /// If the name is already taken; builders choose names statically.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf. Frozen stores become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone().with_requires_grad(true))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of bound leaves into each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn grad_norm(&self) -> T {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Replaces the data of `name`, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::MissingKey(name.to_string()))?;
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::shape("set_data", name.to_string(), t.numel(), data.len()));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::full([2], 3.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let y = tape.sum(bound.var(id)).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(bound.var(id)).is_none());
        store.accumulate_grads(&bound, &grads);
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn accumulation_across_backward_calls() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::full([2], 3.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let y = tape.sum(bound.var(id)).unwrap();
        for _ in 0..2 {
            let grads = tape.backward(y).unwrap();
            store.accumulate_grads(&bound, &grads);
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grads();
        assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0]);
    }
}
