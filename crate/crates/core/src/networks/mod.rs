//! Two-branch variational encoder, recoupler weights and perceptron
//! generator, bundled as [`WsdfModel`].

mod encoder;
mod generator;
mod layers;
mod params;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Result, WsdfError};
use crate::mesh::{MeshHierarchy, TopologyTemplate, DEFAULT_SPIRAL_LEN};
use crate::recoupler::{recouple_graph_with_tangent, RecouplerWeights};

use encoder::EncoderBranch;
use generator::Generator;
pub use params::{BoundParams, ParamId, ParamStore};

/// Encoder log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderArchitecture {
    Spiral,
    Perceptron,
}

/// Shared by both branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: EncoderArchitecture,
    /// Output channels of each spiral stage.
    pub channels: Vec<usize>,
    /// Vertex decimation factor applied after each spiral stage.
    pub pool_factors: Vec<usize>,
    /// Hidden widths of the perceptron encoder.
    pub hidden: Vec<usize>,
    pub spiral_len: usize,
    pub d_id: usize,
    pub d_exp: usize,
    /// Starting log-variance of every posterior; the log-variance heads
    /// begin input-independent at this value.
    pub initial_logvar: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture: EncoderArchitecture::Spiral,
            channels: vec![16, 32, 64, 128],
            pool_factors: vec![4, 4, 4, 4],
            hidden: vec![256, 128],
            spiral_len: DEFAULT_SPIRAL_LEN,
            d_id: 16,
            d_exp: 16,
            initial_logvar: -4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub hidden: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    /// Recoupled code size; `d_id + d_exp` when unset.
    pub recoupled_dim: Option<usize>,
}


impl ModelConfig {
    pub fn k(&self) -> usize {
        self.recoupled_dim.unwrap_or(self.encoder.d_id + self.encoder.d_exp)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.d_id == 0 || e.d_exp == 0 {
            return Err(WsdfError::Config("latent dimensions must be at least 1".into()));
        }
        if self.k() == 0 {
            return Err(WsdfError::Config("recoupled dimension must be at least 1".into()));
        }
        if e.architecture == EncoderArchitecture::Spiral && e.channels.len() != e.pool_factors.len() {
            return Err(WsdfError::Config("one pooling factor per spiral stage is required".into()));
        }
        if !(e.initial_logvar.abs() <= LOGVAR_CLAMP) {
            return Err(WsdfError::Config(format!("initial log-variance must lie within ±{LOGVAR_CLAMP}")));
        }
        if e.spiral_len == 0 {
            return Err(WsdfError::Config("spiral length must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl LatentGaussian {
    /// Clamps `logvar` into the admissible range.
    pub fn new(mu: Array1<f64>, logvar: Array1<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(WsdfError::Shape("mu and logvar lengths differ".into()));
        }
        if mu.iter().chain(logvar.iter()).any(|x| !x.is_finite()) {
            return Err(WsdfError::Validation("posterior parameters must be finite".into()));
        }
        let logvar = logvar.mapv(|x| x.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        Ok(Self { mu, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mu: Array1::zeros(dim), logvar: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Identity,
    Expression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Array1<f64>,
    pub branch: Branch,
}

/// `mu + exp(logvar / 2) ⊙ noise`
pub fn reparameterize(g: &LatentGaussian, noise: ArrayView1<'_, f64>, branch: Branch) -> Result<LatentCode> {
    if noise.len() != g.dim() {
        return Err(WsdfError::Shape(format!("noise has {} entries, posterior {}", noise.len(), g.dim())));
    }
    let values = &g.mu + &(g.logvar.mapv(|l| (0.5 * l).exp()) * noise);
    Ok(LatentCode { values, branch })
}

/// Graph form of [`reparameterize`] for a batch.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, logvar: Var, noise: Array2<f64>) -> Var {
    let half = g.scale(logvar, 0.5);
    let std = g.unary(half, Unary::Exp);
    let eps = g.constant(noise);
    let scaled = g.mul(std, eps);
    g.add(mu, scaled)
}

/// Posterior parameters of both branches for a batch, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct Posteriors {
    pub mu_id: Var,
    pub logvar_id: Var,
    pub mu_exp: Var,
    pub logvar_exp: Var,
}

/// The full generative model with its parameters.
#[derive(Debug, Clone)]
pub struct WsdfModel {
    config: ModelConfig,
    topology: Arc<TopologyTemplate>,
    params: ParamStore,
    enc_id: EncoderBranch,
    enc_exp: EncoderBranch,
    recoupler: ParamId,
    generator: Generator,
}

impl WsdfModel {
    pub fn new(config: ModelConfig, topology: Arc<TopologyTemplate>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder;
        let hierarchy = match enc.architecture {
            EncoderArchitecture::Spiral => {
                if topology.spiral_len() != enc.spiral_len {
                    return Err(WsdfError::Config(format!(
                        "topology spirals have length {}, encoder expects {}",
                        topology.spiral_len(),
                        enc.spiral_len
                    )));
                }
                Some(MeshHierarchy::build(&topology, &enc.pool_factors)?)
            }
            EncoderArchitecture::Perceptron => None,
        };
        let v = topology.vertex_count();
        let mut params = ParamStore::new();
        let enc_id = EncoderBranch::new(&mut params, "enc_id", enc, hierarchy.as_ref(), v, enc.d_id, &mut rng)?;
        let enc_exp = EncoderBranch::new(&mut params, "enc_exp", enc, hierarchy.as_ref(), v, enc.d_exp, &mut rng)?;
        let w = RecouplerWeights::independent(config.k(), enc.d_id, enc.d_exp, &mut rng);
        let recoupler = params.add("recoupler.w_mat", w.w_mat);
        let generator = Generator::new(&mut params, config.k(), &config.generator.hidden, v * 3, &mut rng);
        Ok(Self { config, topology, params, enc_id, enc_exp, recoupler, generator })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<TopologyTemplate> {
        &self.topology
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn d_id(&self) -> usize {
        self.config.encoder.d_id
    }

    pub fn d_exp(&self) -> usize {
        self.config.encoder.d_exp
    }

    pub fn output_dim(&self) -> usize {
        self.topology.vertex_count() * 3
    }

    pub fn recoupler_weights(&self) -> RecouplerWeights {
        RecouplerWeights {
            w_mat: self.params.get(self.recoupler).clone(),
            d_id: self.d_id(),
            d_exp: self.d_exp(),
        }
    }

    /// Learned base mesh, flat `(1, V·3)`.
    pub fn base_mesh(&self) -> &Array2<f64> {
        self.params.get(self.generator.base())
    }

    /// Number of scalars owned by the (identity, expression) encoder branches.
    pub fn branch_parameter_counts(&self) -> (usize, usize) {
        let count = |prefix: &str| {
            self.params
                .iter()
                .filter(|(_, n, _)| n.starts_with(prefix))
                .map(|(_, _, v)| v.len())
                .sum::<usize>()
        };
        (count("enc_id."), count("enc_exp."))
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let cols = g.value(x).ncols();
        if cols != self.output_dim() {
            return Err(WsdfError::Shape(format!(
                "input has {cols} coordinates per scan, topology needs {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Posteriors> {
        self.check_input(g, x)?;
        let (mu_id, logvar_id) = self.enc_id.forward(g, p, x);
        let (mu_exp, logvar_exp) = self.enc_exp.forward(g, p, x);
        Ok(Posteriors { mu_id, logvar_id, mu_exp, logvar_exp })
    }

    /// `G ∘ R (z_id, z_exp)` with an optional tangent on `z_exp`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        z_id: Var,
        z_exp: Var,
        tangent_exp: Option<Var>,
    ) -> (Var, Option<Var>) {
        let (z, dz) = recouple_graph_with_tangent(g, p.var(self.recoupler), z_id, z_exp, tangent_exp);
        self.generator.forward(g, p, z, dz)
    }

    pub fn generate_graph(&self, g: &mut Graph, p: &BoundParams, z: Var, tangent: Option<Var>) -> (Var, Option<Var>) {
        self.generator.forward(g, p, z, tangent)
    }

    /// Posterior parameters for a batch of normalised flat meshes `(n, V·3)`.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Vec<(LatentGaussian, LatentGaussian)>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let post = self.encode_graph(&mut g, &p, xv)?;
        let rows = |v: Var| g.value(v).clone();
        let (mi, li, me, le) = (rows(post.mu_id), rows(post.logvar_id), rows(post.mu_exp), rows(post.logvar_exp));
        (0..x.nrows())
            .map(|r| {
                Ok((
                    LatentGaussian::new(mi.row(r).to_owned(), li.row(r).to_owned())?,
                    LatentGaussian::new(me.row(r).to_owned(), le.row(r).to_owned())?,
                ))
            })
            .collect()
    }

    /// Posterior means stacked as `(n, d_id)` and `(n, d_exp)`.
    pub fn encode_means(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let post = self.encode_graph(&mut g, &p, xv)?;
        Ok((g.value(post.mu_id).clone(), g.value(post.mu_exp).clone()))
    }

    fn check_codes(&self, z_id: &Array2<f64>, z_exp: &Array2<f64>) -> Result<()> {
        if z_id.ncols() != self.d_id() || z_exp.ncols() != self.d_exp() || z_id.nrows() != z_exp.nrows() {
            return Err(WsdfError::Shape(format!(
                "codes {:?} / {:?} do not match latent dims ({}, {})",
                z_id.dim(),
                z_exp.dim(),
                self.d_id(),
                self.d_exp()
            )));
        }
        if z_id.iter().chain(z_exp.iter()).any(|x| !x.is_finite()) {
            return Err(WsdfError::Validation("latent codes must be finite".into()));
        }
        Ok(())
    }

    /// Normalised flat meshes `(n, V·3)` decoded from code pairs.
    pub fn decode(&self, z_id: &Array2<f64>, z_exp: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_codes(z_id, z_exp)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (a, b) = (g.constant(z_id.clone()), g.constant(z_exp.clone()));
        let (out, _) = self.decode_graph(&mut g, &p, a, b, None);
        Ok(g.value(out).clone())
    }

    /// Generator output for recoupled codes `(n, k)`.
    pub fn generate(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.generate_with_tangent(z, None)?.0)
    }

    /// `J_G(z) · tangent` for each row.
    pub fn jvp_generate(&self, z: &Array2<f64>, tangent: &Array2<f64>) -> Result<Array2<f64>> {
        if tangent.dim() != z.dim() {
            return Err(WsdfError::Shape("tangent must match the code shape".into()));
        }
        Ok(self.generate_with_tangent(z, Some(tangent))?.1.expect("tangent given"))
    }

    fn generate_with_tangent(&self, z: &Array2<f64>, tangent: Option<&Array2<f64>>) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        if z.ncols() != self.config.k() {
            return Err(WsdfError::Shape(format!("code has {} entries, expected {}", z.ncols(), self.config.k())));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(WsdfError::Validation("generator input must be finite".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let tv = tangent.map(|t| g.constant(t.clone()));
        let (out, dout) = self.generate_graph(&mut g, &p, zv, tv);
        Ok((g.value(out).clone(), dout.map(|d| g.value(d).clone())))
    }

    /// `J_f(z_exp) · tangent` for `f(y) = G ∘ R (z_id, y)`.
    pub fn jvp_expression(&self, z_id: &Array2<f64>, z_exp: &Array2<f64>, tangent: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_codes(z_id, z_exp)?;
        if tangent.dim() != z_exp.dim() {
            return Err(WsdfError::Shape("tangent must match the expression code shape".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (a, b, t) = (g.constant(z_id.clone()), g.constant(z_exp.clone()), g.constant(tangent.clone()));
        let (_, d) = self.decode_graph(&mut g, &p, a, b, Some(t));
        Ok(g.value(d.expect("tangent given")).clone())
    }

    /// Recoupled codes for code pairs (rows).
    pub fn recouple_codes(&self, z_id: &Array2<f64>, z_exp: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_codes(z_id, z_exp)?;
        let w = self.recoupler_weights();
        let rows: Vec<Array1<f64>> = z_id
            .axis_iter(Axis(0))
            .zip(z_exp.axis_iter(Axis(0)))
            .map(|(a, b)| crate::recoupler::recouple(&w, a, b))
            .collect::<Result<_>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| WsdfError::Shape(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
