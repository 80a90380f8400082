use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learnable parameters keyed by a dotted path, kept in path-sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        match self.names.binary_search(&path) {
            Ok(_) => Err(Error::InvalidConfig(format!("duplicate parameter {path}"))),
            Err(pos) => {
                self.names.insert(pos, path);
                self.tensors.insert(pos, tensor.with_grad());
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(path)).ok()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.index_of(path).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.index_of(path).map(move |i| &mut self.tensors[i])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a graph leaf, in store order.
    pub fn bind(&self, graph: &Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t)).collect()
    }

    /// Extracts per-parameter gradients for leaves made by [`bind`](Self::bind).
    /// Parameters the loss does not reach get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &Gradients) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| match grads.get(*v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Adds `scale · grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &[Vec<f64>], scale: f64) {
        assert_eq!(grads.len(), self.tensors.len());
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            let n = t.numel();
            let dst = t.grad.get_or_insert_with(|| vec![0.0; n]);
            for (d, v) in dst.iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }

    /// Flat copy of all values in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}
