use std::sync::Arc;

use rand::Rng;

use super::layers::{Linear, SpiralConv};
use super::params::{BoundParams, ParamStore};
use super::{EncoderArchitecture, EncoderConfig, LOGVAR_CLAMP};
use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Result, WsdfError};
use crate::mesh::{MeshHierarchy, SparseRows};

#[derive(Debug, Clone)]
enum Body {
    /// Spiral convolution stages, each followed by ELU and a pooling step.
    /// Instance normalisation follows every convolution except the first,
    /// whose output is linear in the input and would lose the deformation
    /// magnitude.
    Spiral { convs: Vec<SpiralConv>, pools: Vec<Arc<SparseRows>>, out_features: usize },
    Perceptron { layers: Vec<Linear>, out_features: usize },
}

/// One encoder branch producing Gaussian posterior parameters.
#[derive(Debug, Clone)]
pub(crate) struct EncoderBranch {
    body: Body,
    mu: Linear,
    logvar: Linear,
    vertex_count: usize,
}

impl EncoderBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        hierarchy: Option<&MeshHierarchy>,
        vertex_count: usize,
        latent: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let body = match cfg.architecture {
            EncoderArchitecture::Spiral => {
                let h = hierarchy.ok_or_else(|| WsdfError::Config("spiral encoder needs a mesh hierarchy".into()))?;
                if h.levels.len() != cfg.channels.len() + 1 {
                    return Err(WsdfError::Config(format!(
                        "{} channel stages need {} pooling levels, hierarchy has {}",
                        cfg.channels.len(),
                        cfg.channels.len(),
                        h.levels.len().saturating_sub(1)
                    )));
                }
                let mut convs = Vec::new();
                let mut pools = Vec::new();
                let mut c_in = 3;
                for (s, &c_out) in cfg.channels.iter().enumerate() {
                    let level = &h.levels[s];
                    convs.push(SpiralConv::new(
                        store,
                        &format!("{name}.conv{s}"),
                        Arc::new(level.spirals.clone()),
                        level.vertex_count,
                        c_in,
                        c_out,
                        rng,
                    ));
                    pools.push(Arc::new(h.levels[s + 1].down.clone().expect("coarse level has a pooling operator")));
                    c_in = c_out;
                }
                let out_features = h.levels.last().expect("non-empty").vertex_count * c_in;
                Body::Spiral { convs, pools, out_features }
            }
            EncoderArchitecture::Perceptron => {
                let mut layers = Vec::new();
                let mut width = vertex_count * 3;
                for (s, &h) in cfg.hidden.iter().enumerate() {
                    layers.push(Linear::new(store, &format!("{name}.fc{s}"), width, h, rng));
                    width = h;
                }
                Body::Perceptron { layers, out_features: width }
            }
        };
        let features = match &body {
            Body::Spiral { out_features, .. } | Body::Perceptron { out_features, .. } => *out_features,
        };
        let mu = Linear::new(store, &format!("{name}.mu"), features, latent, rng);
        let logvar = Linear::zeros(store, &format!("{name}.logvar"), features, latent);
        store.get_mut(logvar.bias).fill(cfg.initial_logvar);
        Ok(Self { body, mu, logvar, vertex_count })
    }

    /// `x` is `(batch, V·3)` in normalised coordinates; returns `(mu, logvar)`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> (Var, Var) {
        let batch = g.value(x).nrows();
        let features = match &self.body {
            Body::Spiral { convs, pools, out_features } => {
                let mut h = g.reshape(x, batch * self.vertex_count, 3);
                for (s, (conv, pool)) in convs.iter().zip(pools).enumerate() {
                    h = conv.forward(g, p, h);
                    if s > 0 {
                        h = g.instance_norm(h, conv.vertex_count);
                    }
                    h = g.elu(h);
                    h = g.pool(h, pool.clone());
                }
                g.reshape(h, batch, *out_features)
            }
            Body::Perceptron { layers, .. } => {
                let mut h = x;
                for layer in layers {
                    h = layer.forward(g, p, h);
                    h = g.elu(h);
                }
                h
            }
        };
        let mu = self.mu.forward(g, p, features);
        let lv = self.logvar.forward(g, p, features);
        let lv = g.unary(lv, Unary::Clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        (mu, lv)
    }
}
