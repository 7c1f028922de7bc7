//! Flat named parameter storage.
//!
//! Each model component owns one `ParamStore`; iteration order is creation
//! order and is the single source of truth for checkpoint sections, optimizer
//! state, and gradient collection.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    /// Register a parameter array. Values are snapped onto the f32 grid so
    /// checkpoints (32-bit on disk) are lossless.
    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> PId {
        t.quantize_f32();
        self.names.push(name.into());
        self.tensors.push(t);
        PId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: PId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<PId> {
        self.names.iter().position(|n| n == name).map(PId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Byte image of all tensors in order; used by freeze checks.
    pub fn byte_image(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Bind every tensor into the graph, as gradient-carrying params when
    /// `trainable`, else as plain leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.leaf(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for one store's tensors, aligned with store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}
