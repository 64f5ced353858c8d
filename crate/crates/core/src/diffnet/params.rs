use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, TapeGradients, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordered collection of named trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    arrays: Vec<Array2<T>>,
    pub seed: u64,
}

/// Shape record used by checkpoints and architecture descriptors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Real> ParameterSet<T> {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), arrays: Vec::new(), seed }
    }

    /// Registers an array and returns its id. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, array: Array2<T>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.arrays.push(array);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.index_of(name).map(|i| &self.arrays[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn array(&self, id: usize) -> &Array2<T> {
        &self.arrays[id]
    }

    pub fn array_mut(&mut self, id: usize) -> &mut Array2<T> {
        &mut self.arrays[id]
    }

    pub fn arrays(&self) -> &[Array2<T>] {
        &self.arrays
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn specs(&self) -> Vec<ArraySpec> {
        self.iter().map(|(n, a)| ArraySpec { name: n.to_string(), rows: a.nrows(), cols: a.ncols() }).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Loads every array onto the tape as a parameter node, ids in order.
    pub fn load(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.arrays.iter().enumerate().map(|(i, a)| tape.param(i, a.clone())).collect()
    }

    /// Reads the scalar at flat position `k` over all arrays.
    pub fn flat_get(&self, k: usize) -> T {
        let (i, j) = self.locate(k);
        self.arrays[i].as_slice().expect("standard layout")[j]
    }

    pub fn flat_set(&mut self, k: usize, v: T) {
        let (i, j) = self.locate(k);
        self.arrays[i].as_slice_mut().expect("standard layout")[j] = v;
    }

    fn locate(&self, mut k: usize) -> (usize, usize) {
        for (i, a) in self.arrays.iter().enumerate() {
            if k < a.len() {
                return (i, k);
            }
            k -= a.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Replaces the values with those of `other`, checking names and shapes.
    pub fn assign_from(&mut self, other: &ParameterSet<T>) -> Result<()> {
        if self.specs() != other.specs() {
            return Err(Error::Shape("parameter layout mismatch".into()));
        }
        self.arrays.clone_from(&other.arrays);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(|a| a.mapv(|v| U::lit(v.as_f64()))).collect(),
            seed: self.seed,
        }
    }
}

/// Dense gradients aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T>(pub Vec<Array2<T>>);

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        Self(params.arrays().iter().map(|a| Array2::zeros(a.raw_dim())).collect())
    }

    pub fn from_tape(params: &ParameterSet<T>, g: TapeGradients<T>) -> Self {
        let mut out = Self::zeros_like(params);
        for (slot, gi) in out.0.iter_mut().zip(g.params) {
            if let Some(gi) = gi {
                *slot = gi;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: T) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * c);
        }
    }

    pub fn norm(&self) -> T {
        self.0.iter().flat_map(|a| a.iter()).fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn flat_get(&self, mut k: usize) -> T {
        for a in &self.0 {
            if k < a.len() {
                return a.as_slice().expect("standard layout")[k];
            }
            k -= a.len();
        }
        panic!("flat gradient index out of range");
    }
}
