//! Multilinear synthetic faces with known identity and expression factors.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DatasetSplit;
use crate::error::{Result, WsdfError};
use crate::mesh::{FaceMesh, ScanRecord, TopologyTemplate, DEFAULT_SPIRAL_LEN};

pub const SYNTHETIC_SOURCE: &str = "synthetic";

/// Serializable recipe; the factor arrays are regenerated from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Grid rows and columns of the face sheet; `rows · cols` vertices.
    pub rows: usize,
    pub cols: usize,
    pub subject_count: usize,
    /// Includes the neutral expression at index 0.
    pub expression_count: usize,
    pub identity_dim: usize,
    pub expression_dim: usize,
    /// Noise standard deviation relative to the mean-mesh coordinate spread.
    pub noise_relative: f64,
    /// RMS per-vertex displacement of one identity basis vector (mm).
    pub identity_scale: f64,
    /// RMS per-vertex displacement of one core-tensor slice (mm).
    pub expression_scale: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 25,
            subject_count: 30,
            expression_count: 11,
            identity_dim: 4,
            expression_dim: 4,
            noise_relative: 0.002,
            identity_scale: 3.0,
            expression_scale: 1.0,
            test_fraction: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn vertex_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WsdfError::Config(m.to_owned()));
        if self.rows < 2 || self.cols < 2 {
            return bad("synthetic grid needs at least 2 rows and 2 columns");
        }
        if self.subject_count < 1 || self.expression_count < 1 {
            return bad("synthetic data needs at least one subject and one expression");
        }
        if self.identity_dim < 1 || self.expression_dim < 1 {
            return bad("factor dimensions must be positive");
        }
        if !(self.noise_relative >= 0.0 && self.noise_relative.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(self.identity_scale >= 0.0 && self.expression_scale >= 0.0) {
            return bad("factor scales must be non-negative");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Arc<TopologyTemplate>> {
        Ok(Arc::new(TopologyTemplate::grid(self.rows, self.cols, DEFAULT_SPIRAL_LEN)?))
    }
}

/// Generative factors: `scan(s, e) = mean + A a_s + T ×₂ a_s ×₃ b_e + noise`.
#[derive(Debug, Clone)]
pub struct SyntheticFactorSpec {
    pub topology: Arc<TopologyTemplate>,
    pub subject_count: usize,
    pub expression_count: usize,
    /// `(V·3, d_a)`
    pub identity_basis: Array2<f64>,
    /// `(V·3, d_a, d_b)`
    pub core_tensor: Array3<f64>,
    /// Flat `(V·3)`
    pub mean_mesh: Array1<f64>,
    pub noise_sigma: f64,
    pub test_fraction: f64,
    pub rng_seed: u64,
}

impl SyntheticFactorSpec {
    pub fn from_config(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let topology = cfg.topology()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grid = grid_coords(cfg.rows, cfg.cols);
        let mean = mean_face(&grid);
        let n = mean.len();
        let mut identity_basis = Array2::zeros((n, cfg.identity_dim));
        for j in 0..cfg.identity_dim {
            let field = smooth_field(&grid, &mut rng, cfg.identity_scale);
            identity_basis.column_mut(j).assign(&field);
        }
        let mut core_tensor = Array3::zeros((n, cfg.identity_dim, cfg.expression_dim));
        for j in 0..cfg.identity_dim {
            for k in 0..cfg.expression_dim {
                let field = smooth_field(&grid, &mut rng, cfg.expression_scale);
                core_tensor.slice_mut(ndarray::s![.., j, k]).assign(&field);
            }
        }
        let centred = &mean.view().into_shape_with_order((n / 3, 3)).expect("flat mesh") - &mean_row(&mean);
        let spread = (centred.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        Ok(Self {
            topology,
            subject_count: cfg.subject_count,
            expression_count: cfg.expression_count,
            identity_basis,
            core_tensor,
            mean_mesh: mean,
            noise_sigma: cfg.noise_relative * spread,
            test_fraction: cfg.test_fraction,
            rng_seed: cfg.seed,
        })
    }

    pub fn identity_dim(&self) -> usize {
        self.identity_basis.ncols()
    }

    pub fn expression_dim(&self) -> usize {
        self.core_tensor.dim().2
    }

    fn validate(&self) -> Result<()> {
        let n = self.topology.vertex_count() * 3;
        let (tn, ta, _) = self.core_tensor.dim();
        if self.identity_basis.nrows() != n || tn != n || self.mean_mesh.len() != n {
            return Err(WsdfError::Validation("factor arrays do not match the vertex count".into()));
        }
        if ta != self.identity_dim() {
            return Err(WsdfError::Validation("core tensor identity mode does not match the basis".into()));
        }
        if !(self.noise_sigma >= 0.0) || self.subject_count == 0 || self.expression_count == 0 {
            return Err(WsdfError::Validation("invalid synthetic counts or noise".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(WsdfError::Validation("test fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `T ×₂ a ×₃ b`, flat.
    pub fn expression_offset(&self, a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
        let (n, da, db) = self.core_tensor.dim();
        let mut out = Array1::zeros(n);
        for j in 0..da {
            for k in 0..db {
                let w = a[j] * b[k];
                if w != 0.0 {
                    out.scaled_add(w, &self.core_tensor.slice(ndarray::s![.., j, k]));
                }
            }
        }
        out
    }

    pub fn neutral(&self, a: &Array1<f64>) -> Array1<f64> {
        &self.mean_mesh + &self.identity_basis.dot(a)
    }
}

pub fn subject_name(s: usize) -> String {
    format!("s{s:03}")
}

pub fn expression_name(e: usize) -> String {
    format!("e{e:02}")
}

/// Generated scans plus everything needed to check a model against truth.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub split: DatasetSplit,
    pub ground_truth: BTreeMap<String, FaceMesh>,
    /// `(S, d_a)`
    pub identity_coeffs: Array2<f64>,
    /// `(E, d_b)`; row 0 is zero and rows sum to zero.
    pub expression_coeffs: Array2<f64>,
}

pub fn generate_synthetic(spec: &SyntheticFactorSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    // separate stream from the factor construction
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x5eed_da7a);
    let (s_count, e_count) = (spec.subject_count, spec.expression_count);
    let mut a = Array2::<f64>::from_shape_fn((s_count, spec.identity_dim()), |_| rng.sample(StandardNormal));
    // shared offset so that one expression looks alike across subjects
    a.column_mut(0).mapv_inplace(|x| x + 1.5);
    let mut b = Array2::<f64>::zeros((e_count, spec.expression_dim()));
    if e_count > 1 {
        for e in 1..e_count {
            for k in 0..spec.expression_dim() {
                b[[e, k]] = rng.sample(StandardNormal);
            }
        }
        let mean = b.slice(ndarray::s![1.., ..]).mean_axis(Axis(0)).expect("non-empty");
        for mut row in b.rows_mut().into_iter().skip(1) {
            row -= &mean;
        }
    }

    let mut order: Vec<usize> = (0..s_count).collect();
    order.shuffle(&mut rng);
    let n_test = (spec.test_fraction * s_count as f64).round() as usize;
    let held_out: std::collections::BTreeSet<String> = order[..n_test].iter().map(|&s| subject_name(s)).collect();

    let mut split = DatasetSplit::default();
    let mut ground_truth = BTreeMap::new();
    for s in 0..s_count {
        let a_s = a.row(s).to_owned();
        let neutral = spec.neutral(&a_s);
        let name = subject_name(s);
        ground_truth.insert(name.clone(), FaceMesh::from_flat(neutral.as_slice().expect("contiguous"), spec.topology.clone())?);
        for e in 0..e_count {
            let mut scan = &neutral + &spec.expression_offset(&a_s, &b.row(e).to_owned());
            if spec.noise_sigma > 0.0 {
                scan.mapv_inplace(|x| x + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal));
            }
            let mesh = FaceMesh::from_flat(scan.as_slice().expect("contiguous"), spec.topology.clone())?;
            let rec = ScanRecord::new(mesh, name.clone(), Some(expression_name(e)), SYNTHETIC_SOURCE)?;
            if held_out.contains(&name) {
                split.test.push(rec);
            } else {
                split.train.push(rec);
            }
        }
    }
    split.held_out_subjects = held_out;
    Ok(SyntheticDataset { split, ground_truth, identity_coeffs: a, expression_coeffs: b })
}

/// Grid positions in millimetres, roughly face sized.
fn grid_coords(rows: usize, cols: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let y = 90.0 - 180.0 * r as f64 / (rows - 1) as f64;
            let x = -70.0 + 140.0 * c as f64 / (cols - 1) as f64;
            out.push((x, y));
        }
    }
    out
}

fn mean_face(grid: &[(f64, f64)]) -> Array1<f64> {
    let mut out = Array1::zeros(grid.len() * 3);
    for (v, &(x, y)) in grid.iter().enumerate() {
        let dome = 60.0 * (-(x * x) / (2.0 * 55.0f64.powi(2)) - (y * y) / (2.0 * 75.0f64.powi(2))).exp();
        let nose = 25.0 * (-(x * x) / (2.0 * 9.0f64.powi(2)) - (y + 5.0).powi(2) / (2.0 * 18.0f64.powi(2))).exp();
        out[3 * v] = x;
        out[3 * v + 1] = y;
        out[3 * v + 2] = dome + nose;
    }
    out
}

/// Sum of a few random Gaussian bumps per axis, rescaled to the given RMS
/// per-vertex displacement.
fn smooth_field(grid: &[(f64, f64)], rng: &mut ChaCha8Rng, rms: f64) -> Array1<f64> {
    let mut out = Array1::zeros(grid.len() * 3);
    for axis in 0..3 {
        for _ in 0..3 {
            let cx = rng.random_range(-70.0..70.0);
            let cy = rng.random_range(-90.0..90.0);
            let radius: f64 = rng.random_range(15.0..45.0);
            let w: f64 = rng.sample(StandardNormal);
            for (v, &(x, y)) in grid.iter().enumerate() {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                out[3 * v + axis] += w * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
    let per_vertex = (out.iter().map(|x| x * x).sum::<f64>() / grid.len() as f64).sqrt();
    if per_vertex > 0.0 {
        out *= rms / per_vertex;
    }
    out
}

fn mean_row(flat: &Array1<f64>) -> Array1<f64> {
    flat.view()
        .into_shape_with_order((flat.len() / 3, 3))
        .expect("flat mesh")
        .mean_axis(Axis(0))
        .expect("non-empty")
}
