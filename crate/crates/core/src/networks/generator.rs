use rand::Rng;

use super::layers::Linear;
use super::params::{BoundParams, ParamId, ParamStore};
use crate::autodiff::{Graph, Unary, Var};

/// Perceptron from the recoupled code to vertex offsets, added to a learned
/// base mesh. The output layer starts at zero, so an untrained generator
/// returns the base mesh for every code.
#[derive(Debug, Clone)]
pub(crate) struct Generator {
    hidden: Vec<Linear>,
    out: Linear,
    base: ParamId,
}

impl Generator {
    pub fn new(store: &mut ParamStore, input: usize, widths: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let mut hidden = Vec::new();
        let mut w = input;
        for (i, &h) in widths.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("generator.fc{i}"), w, h, rng));
            w = h;
        }
        let out = Linear::zeros(store, "generator.out", w, output);
        let base = store.add("generator.base", ndarray::Array2::zeros((1, output)));
        Self { hidden, out, base }
    }

    pub fn base(&self) -> ParamId {
        self.base
    }

    /// Output and, when a tangent is given, the directional derivative
    /// `J(z)·tangent`, built from graph operations.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, z: Var, tangent: Option<Var>) -> (Var, Option<Var>) {
        let mut h = z;
        let mut dh = tangent;
        for layer in &self.hidden {
            let pre = layer.forward(g, p, h);
            h = g.elu(pre);
            dh = dh.map(|d| {
                let dpre = layer.tangent(g, p, d);
                let slope = g.unary(pre, Unary::EluDeriv);
                g.mul(slope, dpre)
            });
        }
        let offsets = self.out.forward(g, p, h);
        let out = g.add_row(offsets, p.var(self.base));
        let dout = dh.map(|d| self.out.tangent(g, p, d));
        (out, dout)
    }
}
