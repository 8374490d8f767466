use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Matrix};
use crate::Scalar;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// One named trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Matrix<S>,
    pub grad: Matrix<S>,
    pub first_moment: Matrix<S>,
    pub second_moment: Matrix<S>,
}

/// Named parameters in insertion order.
///
/// Every store carries a process-unique id; tape leaves bound from a store
/// remember it so `Tape::backward` only writes into the store they came from.
/// Cloning produces a store with a new id.
#[derive(Debug)]
pub struct ParamStore<S> {
    id: u64,
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, usize>,
    steps: u64,
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            steps: self.steps,
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> PartialEq for ParamStore<S> {
    /// Compares names, values and step counts, not ids or optimizer state.
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            params: Vec::new(),
            by_name: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<S>) -> Result<usize, AutodiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "param" });
        }
        let (r, c) = value.shape();
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Param {
            name,
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Matrix<S>, AutodiffError> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix<S>, AutodiffError> {
        let i = self
            .index_of(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        Ok(&mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix<S>, AutodiffError> {
        self.get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().fill(S::zero());
        }
    }

    /// Number of optimizer updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, grad: &Matrix<S>) {
        self.params[index].grad.add_assign(grad);
    }
}
