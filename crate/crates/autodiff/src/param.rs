use serde::{Deserialize, Serialize};

use crate::{AutodiffError, Graph, Gradients, Result, Tensor, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of learnable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces values with those of `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(AutodiffError::InvalidArgument(
                "parameter sets have different layouts".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "copy_from",
                    left: dst.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Placement of parameters on one graph. Parameters may be bound more than
/// once on the same graph, e.g. once trainable and once as constants.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Binds every parameter; `trainable(id)` decides whether it receives gradients.
    pub fn new(graph: &Graph, params: &ParamSet, trainable: impl Fn(ParamId) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(id, _, t)| graph.leaf(t.clone(), trainable(id)))
            .collect();
        Self { vars }
    }

    /// Uses existing graph nodes, one per parameter in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn all_trainable(graph: &Graph, params: &ParamSet) -> Self {
        Self::new(graph, params, |_| true)
    }

    pub fn all_constant(graph: &Graph, params: &ParamSet) -> Self {
        Self::new(graph, params, |_| false)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros where the loss did not depend on it.
    pub fn collect(&self, grads: &Gradients, params: &ParamSet) -> Vec<Vec<f64>> {
        params
            .iter()
            .map(|(id, _, t)| grads.get_or_zeros(self.var(id), t.len()))
            .collect()
    }
}
