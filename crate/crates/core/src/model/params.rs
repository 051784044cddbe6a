use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
///
/// Every tensor is stored once; weight sharing is expressed by reusing a
/// name, never by copying.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.tensors.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Check that `store` holds exactly the named shapes in `layout`, in order.
pub(crate) fn check_layout<T: Scalar>(
    store: &ParamStore<T>,
    layout: &[(String, Vec<usize>)],
) -> Result<()> {
    if store.len() != layout.len() {
        return Err(Error::Contract(alloc::format!(
            "expected {} parameter tensors, found {}",
            layout.len(),
            store.len()
        )));
    }
    for ((name, t), (want_name, want_shape)) in store.iter().zip(layout) {
        if name != want_name || t.shape() != want_shape.as_slice() {
            return Err(Error::Contract(alloc::format!(
                "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("extent matches")
}
