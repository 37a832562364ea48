use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Mat, Var};
use crate::error::{Result, WsdfError};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform `(fan_in, fan_out)` matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a));
        self.add(name, w)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.values.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a tensor by name; shapes must agree.
    pub fn set_by_name(&mut self, name: &str, value: Mat) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| WsdfError::Validation(format!("unknown parameter {name}")))?;
        if self.values[id.0].dim() != value.dim() {
            return Err(WsdfError::Shape(format!(
                "parameter {name}: stored {:?}, given {:?}",
                self.values[id.0].dim(),
                value.dim()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Puts every tensor on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { vars: self.values.iter().map(|v| g.param(v.clone())).collect() }
    }

    /// Puts every tensor on the graph as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams { vars: self.values.iter().map(|v| g.constant(v.clone())).collect() }
    }
}

/// Graph handles of a [`ParamStore`] for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zeros where none flowed.
    pub fn collect_grads(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Mat> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, value)| grads.take(v).unwrap_or_else(|| Mat::zeros(value.dim())))
            .collect()
    }
}
