//! Binds registry parameters to graph leaves for one forward pass.

use std::collections::HashMap;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamStore, TrainableMask};
use crate::tensor::Tensor;

/// How batch-norm layers obtain their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running buffers are updated afterwards.
    Train,
    /// Batch statistics without buffer updates.
    Batch,
    /// Running statistics.
    Eval,
}

pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    mask: Option<&'a TrainableMask>,
    vars: HashMap<usize, Var>,
    pub mode: NormMode,
    /// Batch mean and unbiased variance per batch-norm prefix, in `Train` mode.
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    /// With no mask every parameter is differentiable (if the graph records).
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, mask: Option<&'a TrainableMask>, mode: NormMode) -> Self {
        Ctx { g, store, mask, vars: HashMap::new(), mode, bn_stats: Vec::new() }
    }

    pub fn trainable(&self, id: usize) -> bool {
        self.mask.map_or(true, |m| m.get(id))
    }

    pub fn trainable_name(&self, name: &str) -> Result<bool> {
        Ok(self.trainable(self.store.id(name)?))
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let rg = self.g.is_recording() && self.trainable(id);
        let v = self.g.leaf(self.store.entry(id).value.clone(), rg);
        self.vars.insert(id, v);
        Ok(v)
    }

    /// Uses an existing graph node for `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let id = self.store.id(name)?;
        self.vars.insert(id, var);
        Ok(())
    }

    pub fn try_p(&mut self, name: &str) -> Option<Var> {
        self.store.contains(name).then(|| self.p(name).expect("registered"))
    }

    /// Gradients of every bound parameter that received one, keyed by registry id.
    pub fn grads(&self) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> =
            self.vars.iter().filter_map(|(&id, &v)| self.g.grad(v).map(|t| (id, t.clone()))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
