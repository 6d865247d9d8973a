use std::collections::HashMap;

use crate::error::{CmtrError, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, bound for one pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps handles given in store order, e.g. inputs of a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CmtrError::contract(format!("duplicate parameter name {}", name)));
        }
        tensor.requires_grad = true;
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape`. Parameters with
    /// `requires_grad == false` are bound as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        ParamVars { vars }
    }

    /// Binds with no parameter receiving gradients (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        ParamVars { vars }
    }

    /// Copies gradients from a reverse pass into each tensor's `grad`.
    /// Unreached parameters get a zero gradient.
    pub fn write_grads(&mut self, grads: &Gradients<T>, vars: &ParamVars) {
        for (t, &v) in self.tensors.iter_mut().zip(&vars.vars) {
            t.grad = if t.requires_grad { Some(grads.dense(v, t.len())) } else { None };
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].requires_grad = trainable;
    }

    /// Global L2 norm of all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.grad_norm_sq()).sum::<f64>().sqrt()
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn assign(&mut self, id: ParamId, data: &[T]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(CmtrError::shape("assign", format!("{} values for {:?}", data.len(), t.shape())));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros([2])).unwrap();
        assert!(s.insert("w", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::full([2], 1.0)).unwrap();
        let b = s.insert("b", Tensor::full([2], 2.0)).unwrap();
        s.set_trainable(b, false);
        let mut tape = Tape::new();
        let pv = s.bind(&mut tape);
        let p = tape.mul(pv[a], pv[b]).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        s.write_grads(&g, &pv);
        assert_eq!(s.get(a).grad.as_deref(), Some(&[2.0, 2.0][..]));
        assert!(s.get(b).grad.is_none());
        assert!((s.grad_norm() - 8f64.sqrt()).abs() < 1e-15);
    }
}
