use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{Gradients, RngStream, Scalar, Tape, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<T: Scalar>(&self, other: &ParamSet<T>) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor on `tape`, as leaves when `trainable`, else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> Bound<'t, '_, S> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'t, 'p, S: Scalar> {
    set: &'p ParamSet<S>,
    vars: Vec<Var<'t, S>>,
}

impl<'t, 'p, S: Scalar> Bound<'t, 'p, S> {
    /// Binding with caller-supplied vars, one per tensor in set order.
    pub fn from_vars(set: &'p ParamSet<S>, vars: Vec<Var<'t, S>>) -> Self {
        assert_eq!(set.len(), vars.len(), "one var per parameter");
        Self { set, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, S>> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    /// Gradients for every parameter, in set order.
    pub fn grads(&self, g: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// He-normal weight scaled by `gain`.
pub(crate) fn he<S: Scalar>(rng: &mut RngStream, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<S> {
    let sd = gain * libm::sqrt(2.0 / fan_in as f64);
    let data = rng.normals(shape.iter().product()).into_iter().map(|z| S::from_f64(z * sd)).collect();
    Tensor::new(shape, data).expect("shape matches draw count")
}
