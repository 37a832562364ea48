use std::sync::Arc;

use rand::Rng;

use super::params::{BoundParams, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), ndarray::Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    /// Same shape, all parameters zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), ndarray::Array2::zeros((fan_in, fan_out)));
        let bias = store.add(format!("{name}.bias"), ndarray::Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let h = g.matmul(x, p.var(self.weight));
        g.add_row(h, p.var(self.bias))
    }

    /// Tangent of the affine map: the bias drops out.
    pub fn tangent(&self, g: &mut Graph, p: &BoundParams, dx: Var) -> Var {
        g.matmul(dx, p.var(self.weight))
    }
}

/// Spiral convolution: gather each vertex's spiral, then a shared linear map.
#[derive(Debug, Clone)]
pub(crate) struct SpiralConv {
    pub linear: Linear,
    pub spirals: Arc<Vec<Vec<usize>>>,
    pub vertex_count: usize,
}

impl SpiralConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spirals: Arc<Vec<Vec<usize>>>,
        vertex_count: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let len = spirals.first().map_or(1, |s| s.len());
        let linear = Linear::new(store, name, len * c_in, c_out, rng);
        Self { linear, spirals, vertex_count }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let gathered = g.gather(x, self.spirals.clone(), self.vertex_count);
        self.linear.forward(g, p, gathered)
    }
}
