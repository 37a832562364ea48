//! Bilinear tensor fusion of identity and expression codes.
//!
//! Both codes are pushed through the normal CDF, combined by an outer product,
//! mapped back to standard normals through the product-of-uniforms CDF and
//! the normal quantile, and mixed by a row-normalised weight matrix (the
//! reshaped fusion tensor).

pub mod transforms;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Result, WsdfError};

pub use transforms::{
    gaussian_to_uniform, normal_cdf, normal_quantile, product_to_normal, product_uniform_cdf, UNIFORM_EPS,
};

/// The fusion tensor in reshaped `(k, d_id · d_exp)` form, row-major over
/// `(i, j)`: column `i · d_exp + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecouplerWeights {
    pub w_mat: Array2<f64>,
    pub d_id: usize,
    pub d_exp: usize,
}

impl RecouplerWeights {
    pub fn new(w_mat: Array2<f64>, d_id: usize, d_exp: usize) -> Result<Self> {
        if d_id == 0 || d_exp == 0 || w_mat.ncols() != d_id * d_exp || w_mat.nrows() == 0 {
            return Err(WsdfError::Shape(format!(
                "recoupler matrix {:?} incompatible with d_id={d_id}, d_exp={d_exp}",
                w_mat.dim()
            )));
        }
        Ok(Self { w_mat, d_id, d_exp })
    }

    pub fn random(k: usize, d_id: usize, d_exp: usize, rng: &mut impl Rng) -> Self {
        let w_mat = Array2::from_shape_fn((k, d_id * d_exp), |_| rng.sample::<f64, _>(StandardNormal));
        Self { w_mat, d_id, d_exp }
    }

    /// Each row is supported on a random transversal of the `d_id × d_exp`
    /// grid: no two entries share an identity or an expression index, so the
    /// mixed entries are independent and each output has unit variance.
    pub fn independent(k: usize, d_id: usize, d_exp: usize, rng: &mut impl Rng) -> Self {
        let mut w_mat = Array2::zeros((k, d_id * d_exp));
        let mut ids: Vec<usize> = (0..d_id).collect();
        let mut exps: Vec<usize> = (0..d_exp).collect();
        for mut row in w_mat.rows_mut() {
            ids.shuffle(rng);
            exps.shuffle(rng);
            for (&i, &j) in ids.iter().zip(&exps) {
                row[i * d_exp + j] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self { w_mat, d_id, d_exp }
    }

    pub fn output_dim(&self) -> usize {
        self.w_mat.nrows()
    }

    /// Weights actually applied in the forward pass: each row scaled to unit norm.
    pub fn effective(&self) -> Array2<f64> {
        let mut w = self.w_mat.clone();
        for mut row in w.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
        }
        w
    }
}

/// `𝕄_N(𝕌(z_id) ⊗ 𝕌(z_exp))` before mixing, flattened identity-major.
pub fn fused_normals(z_id: ArrayView1<'_, f64>, z_exp: ArrayView1<'_, f64>) -> Array1<f64> {
    let u_id: Vec<f64> = z_id.iter().map(|&x| gaussian_to_uniform(x)).collect();
    let u_exp: Vec<f64> = z_exp.iter().map(|&x| gaussian_to_uniform(x)).collect();
    let mut out = Array1::zeros(u_id.len() * u_exp.len());
    for (i, a) in u_id.iter().enumerate() {
        for (j, b) in u_exp.iter().enumerate() {
            out[i * u_exp.len() + j] = product_to_normal(a * b);
        }
    }
    out
}

/// Recoupled code for a single pair of latent vectors.
pub fn recouple(w: &RecouplerWeights, z_id: ArrayView1<'_, f64>, z_exp: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if z_id.len() != w.d_id || z_exp.len() != w.d_exp {
        return Err(WsdfError::Shape(format!(
            "codes ({}, {}) do not match recoupler ({}, {})",
            z_id.len(),
            z_exp.len(),
            w.d_id,
            w.d_exp
        )));
    }
    Ok(w.effective().dot(&fused_normals(z_id, z_exp)))
}

/// Differentiable batched recoupling: `z_id (n, d_id)`, `z_exp (n, d_exp)`,
/// raw weights `(k, d_id · d_exp)` -> `(n, k)`.
pub fn recouple_graph(g: &mut Graph, w_raw: Var, z_id: Var, z_exp: Var) -> Var {
    recouple_graph_with_tangent(g, w_raw, z_id, z_exp, None).0
}

/// As [`recouple_graph`], additionally propagating a tangent on `z_exp`
/// (forward mode, expressed with graph operations so that it is itself
/// differentiable). Returns `(z, dz)`; `dz` is `None` without a tangent.
pub fn recouple_graph_with_tangent(
    g: &mut Graph,
    w_raw: Var,
    z_id: Var,
    z_exp: Var,
    tangent_exp: Option<Var>,
) -> (Var, Option<Var>) {
    let u_id = g.unary(z_id, Unary::NormalCdf);
    let u_exp = g.unary(z_exp, Unary::NormalCdf);
    let prod = g.outer(u_id, u_exp);
    let normals = g.unary(prod, Unary::ProductToNormal);
    let w = g.row_normalize(w_raw);
    let z = g.matmul_bt(normals, w);
    let dz = tangent_exp.map(|t| {
        let du_scale = g.unary(z_exp, Unary::NormalCdfDeriv);
        let du_exp = g.mul(du_scale, t);
        let dprod = g.outer(u_id, du_exp);
        let dn_scale = g.unary(prod, Unary::ProductToNormalDeriv);
        let dn = g.mul(dn_scale, dprod);
        g.matmul_bt(dn, w)
    });
    (z, dz)
}

/// Reference mode-n contraction `(𝒲 ×₂ U2 ×₃ U3)_{krs} = Σ_i Σ_j 𝒲_{kij} U2_{ri} U3_{sj}`
/// by explicit loops. Used as an independent oracle in tests.
pub fn tensor_contract_oracle(w: &Array3<f64>, u2: &Array2<f64>, u3: &Array2<f64>) -> Result<Array3<f64>> {
    let (k, i_dim, j_dim) = w.dim();
    if u2.ncols() != i_dim || u3.ncols() != j_dim {
        return Err(WsdfError::Shape(format!(
            "tensor {:?} incompatible with factors {:?}, {:?}",
            w.dim(),
            u2.dim(),
            u3.dim()
        )));
    }
    let (r_dim, s_dim) = (u2.nrows(), u3.nrows());
    let mut out = Array3::zeros((k, r_dim, s_dim));
    for kk in 0..k {
        for r in 0..r_dim {
            for s in 0..s_dim {
                let mut acc = 0.0;
                for i in 0..i_dim {
                    for j in 0..j_dim {
                        acc += w[[kk, i, j]] * u2[[r, i]] * u3[[s, j]];
                    }
                }
                out[[kk, r, s]] = acc;
            }
        }
    }
    Ok(out)
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(r, c)| a[[r / br, c / bc]] * b[[r % br, c % bc]])
}

/// Mode-1 unfolding `𝕄_𝒲` of a `(k, i, j)` tensor to `(k, i·j)`.
pub fn reshape_tensor(w: &Array3<f64>) -> Array2<f64> {
    let (k, i, j) = w.dim();
    Array2::from_shape_vec((k, i * j), w.iter().copied().collect()).expect("contiguous tensor")
}
