use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; names must be unique. The tensor is marked as
    /// requiring gradients.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let idx = self.tensors.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(TensorError::UnknownParam(name.to_string())),
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients from a backward pass into each tensor's
    /// `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (idx, g) in grads.param_grads() {
            let t = self
                .tensors
                .get_mut(idx)
                .ok_or_else(|| TensorError::UnknownParam(format!("#{idx}")))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf_with_param(t, Some(i)))
            .collect();
        BoundParams {
            vars,
            index: Rc::new(self.index.clone()),
        }
    }

    /// Name → position map, for building [`BoundParams`] from explicit vars.
    pub fn name_index(&self) -> Rc<HashMap<String, usize>> {
        Rc::new(self.index.clone())
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Clone)]
pub struct BoundParams<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
    index: Rc<HashMap<String, usize>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    /// Pairs externally created vars with a name index (vars in store order).
    pub fn from_vars(index: Rc<HashMap<String, usize>>, vars: Vec<Var<'t, T>>) -> Self {
        BoundParams { vars, index }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.index
            .get(name)
            .and_then(|&i| self.vars.get(i).copied())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[2])),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let w = p.get("w").unwrap();
        let loss = w.mul(w).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        s.accumulate(&g1).unwrap();
        s.accumulate(&g2).unwrap();
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[12.0]);
        s.zero_grad();
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[0.0]);
    }
}
