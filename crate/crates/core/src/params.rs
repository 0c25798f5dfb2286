//! Named parameter storage and tape binding.

use std::ops::Index;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry a parameter lives on, which decides how it is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Euclidean,
    /// Square matrix with orthonormal rows.
    Stiefel,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
}

/// Tape leaves for every tensor of a [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t, trainable)).collect(),
            trainable,
        }
    }

    /// Copies gradients for `bound` into each tensor's `grad` slot, replacing
    /// what was there. Parameters that received no gradient get zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            t.grad = Some(grads.get_or_zeros(v, t));
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// All values concatenated in set order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// All gradients concatenated in set order (zeros where absent).
    pub fn flatten_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match &t.grad {
                Some(g) => g.clone(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Overwrites all values from a flat vector produced by [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Invalid(format!(
                "flat vector has {} values, parameter set has {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Order-sensitive digest of every value's bit pattern (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Offset of each parameter in the flat layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.tensors
            .iter()
            .map(|t| {
                let o = acc;
                acc += t.numel();
                o
            })
            .collect()
    }
}
