//! Named parameter collections and the small layer helpers shared by every
//! network in the crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named set of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every tensor on the tape as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Puts every tensor on the tape as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replaces tensor values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter names differ"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!("parameter shape {:?} vs {:?}", a.shape(), b.shape())));
            }
            *a = b.clone();
        }
        Ok(())
    }
}

/// `n_in * n_out + n_out`: weights plus biases of one dense layer.
pub fn layer_param_count(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

/// Adds a Glorot-initialised dense layer and returns `(weight, bias)` indices.
pub fn push_dense<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    n_in: usize,
    n_out: usize,
    rng: &mut R,
) -> (usize, usize) {
    let w = params.push(format!("{prefix}.weight"), Tensor::glorot(n_in, n_out, rng));
    let b = params.push(format!("{prefix}.bias"), Tensor::zeros(1, n_out));
    (w, b)
}

/// `x W + b` for a batch of rows.
pub fn dense<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    x.matmul(w).add_row(b)
}

/// Plain-tensor `x W + b`.
pub fn dense_tensor(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = x.matmul(w).expect("dense shapes");
    let n = y.cols();
    for row in y.data_mut().chunks_mut(n) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    y
}

/// PReLU on a plain tensor.
pub fn prelu_tensor(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Largest divisor of `width` that does not exceed `groups`.
pub fn effective_groups(width: usize, groups: usize) -> usize {
    (1..=groups.min(width)).rev().find(|g| width % g == 0).unwrap_or(1)
}
