//! Training objectives. Every loss sums over coordinates (or latent
//! dimensions) and averages over the batch.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Unary, Var};
use crate::error::{Result, WsdfError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_neu: f64,
    pub lambda_jac: f64,
    pub lambda_mi: f64,
    /// Slope of the upper bound in the Jacobian loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_neu: 1.0, lambda_jac: 0.1, lambda_mi: 0.01, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_neu, self.lambda_jac, self.lambda_mi];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(WsdfError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(WsdfError::Config("gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar value of each term and of the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub neu: f64,
    pub jac: f64,
    pub mi: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(rec: f64, kl: f64, neu: f64, jac: f64, mi: f64, w: &LossWeights) -> Self {
        let total = rec + kl + w.lambda_neu * neu + w.lambda_jac * jac + w.lambda_mi * mi;
        Self { rec, kl, neu, jac, mi, total }
    }
}

fn batch_rows(g: &Graph, v: Var) -> f64 {
    g.value(v).nrows() as f64
}

/// `Σ‖x_rec − x‖² / batch`
pub fn loss_rec(g: &mut Graph, x: Var, x_rec: Var) -> Var {
    let n = batch_rows(g, x);
    let d = g.sub(x_rec, x);
    let sq = g.unary(d, Unary::Square);
    let s = g.sum(sq);
    g.scale(s, 1.0 / n)
}

fn kl_branch(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    // ½ Σ (e^lv + mu² − 1 − lv); the −1 is added as a constant
    let ev = g.unary(logvar, Unary::Exp);
    let mu2 = g.unary(mu, Unary::Square);
    let a = g.add(ev, mu2);
    let b = g.sub(a, logvar);
    let ones = g.constant(Mat::ones(g.value(mu).dim()));
    let c = g.sub(b, ones);
    let s = g.sum(c);
    g.scale(s, 0.5)
}

/// KL of both diagonal posteriors to the standard normal, summed over
/// dimensions and branches, averaged over the batch.
pub fn loss_kl(g: &mut Graph, mu_id: Var, logvar_id: Var, mu_exp: Var, logvar_exp: Var) -> Var {
    let n = batch_rows(g, mu_id);
    let a = kl_branch(g, mu_id, logvar_id);
    let b = kl_branch(g, mu_exp, logvar_exp);
    let s = g.add(a, b);
    g.scale(s, 1.0 / n)
}

/// `Σ_b w_b ‖B_b − x_neu,b‖² / batch`, where row `b` of `targets` is the
/// bank entry of that scan's subject and `w_b` its confidence (zero for
/// subjects without an initialised entry). Targets are constants.
pub fn loss_neu(g: &mut Graph, targets: Mat, weights: Mat, x_neu: Var) -> Var {
    let n = batch_rows(g, x_neu);
    let t = g.constant(targets);
    let w = g.constant(weights);
    let d = g.sub(x_neu, t);
    let sq = g.unary(d, Unary::Square);
    let per = g.sum_cols(sq);
    let weighted = g.mul_col(per, w);
    let s = g.sum(weighted);
    g.scale(s, 1.0 / n)
}

/// Jacobian hinge: with `p = dᵀ J z_exp` and `q = γ‖z_exp‖²`, returns the
/// batch mean of `max(0, −p, p − q)` (written as `relu(−p) + relu(p − q)`,
/// the two being exclusive for `q ≥ 0`) and the `p` column.
///
/// `difference` is `x_rec − x_neu` and is treated as a constant.
pub fn loss_jac(g: &mut Graph, difference: Mat, jvp: Var, z_exp: Var, gamma: f64) -> (Var, Var) {
    let n = batch_rows(g, jvp);
    let d = g.constant(difference);
    let prod = g.mul(d, jvp);
    let p = g.sum_cols(prod);
    let zz = g.unary(z_exp, Unary::Square);
    let zsum = g.sum_cols(zz);
    let q = g.scale(zsum, gamma);
    let neg_p = g.scale(p, -1.0);
    let lower = g.relu(neg_p);
    let excess = g.sub(p, q);
    let upper = g.relu(excess);
    let both = g.add(lower, upper);
    let s = g.sum(both);
    (g.scale(s, 1.0 / n), p)
}

/// Within-subject spread of identity means: mean over groups of the mean
/// squared distance to the group centroid. Singleton groups contribute zero.
pub fn loss_mi(g: &mut Graph, mu_id: Var, groups: &[Vec<usize>]) -> Var {
    let b = batch_rows(g, mu_id) as usize;
    let mut centering = Array2::<f64>::eye(b);
    let mut weights = Mat::zeros((b, 1));
    let ngroups = groups.len().max(1) as f64;
    for members in groups {
        let m = members.len() as f64;
        for &i in members {
            for &j in members {
                centering[[i, j]] -= 1.0 / m;
            }
            weights[[i, 0]] = 1.0 / (m * ngroups);
        }
    }
    let c = g.constant(centering);
    let centered = g.matmul(c, mu_id);
    let sq = g.unary(centered, Unary::Square);
    let per = g.sum_cols(sq);
    let w = g.constant(weights);
    let weighted = g.mul_col(per, w);
    g.sum(weighted)
}

/// Value-level helpers, evaluated on a throwaway graph.
pub mod eval {
    use super::*;

    fn with_graph(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.scalar(v)
    }

    fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
        if a.dim() != b.dim() {
            return Err(WsdfError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
        }
        Ok(())
    }

    pub fn rec(x: &Mat, x_rec: &Mat) -> Result<f64> {
        same_shape(x, x_rec)?;
        Ok(with_graph(|g| {
            let (a, b) = (g.constant(x.clone()), g.constant(x_rec.clone()));
            loss_rec(g, a, b)
        }))
    }

    pub fn kl(mu_id: &Mat, lv_id: &Mat, mu_exp: &Mat, lv_exp: &Mat) -> Result<f64> {
        same_shape(mu_id, lv_id)?;
        same_shape(mu_exp, lv_exp)?;
        Ok(with_graph(|g| {
            let v: Vec<Var> = [mu_id, lv_id, mu_exp, lv_exp].iter().map(|m| g.constant((*m).clone())).collect();
            loss_kl(g, v[0], v[1], v[2], v[3])
        }))
    }

    pub fn neu(targets: &Mat, weights: &Mat, x_neu: &Mat) -> Result<f64> {
        same_shape(targets, x_neu)?;
        if weights.dim() != (x_neu.nrows(), 1) {
            return Err(WsdfError::Shape("one confidence weight per row is required".into()));
        }
        Ok(with_graph(|g| {
            let x = g.constant(x_neu.clone());
            loss_neu(g, targets.clone(), weights.clone(), x)
        }))
    }

    /// Returns the loss and the per-sample projections `p`.
    pub fn jac(difference: &Mat, jvp: &Mat, z_exp: &Mat, gamma: f64) -> Result<(f64, Vec<f64>)> {
        same_shape(difference, jvp)?;
        if z_exp.nrows() != jvp.nrows() {
            return Err(WsdfError::Shape("expression codes and JVP rows differ".into()));
        }
        let mut g = Graph::new();
        let (j, z) = (g.constant(jvp.clone()), g.constant(z_exp.clone()));
        let (l, p) = loss_jac(&mut g, difference.clone(), j, z, gamma);
        Ok((g.scalar(l), g.value(p).iter().copied().collect()))
    }

    pub fn mi(mu_id: &Mat, groups: &[Vec<usize>]) -> Result<f64> {
        if groups.iter().flatten().any(|&i| i >= mu_id.nrows()) {
            return Err(WsdfError::Shape("group index outside the batch".into()));
        }
        Ok(with_graph(|g| {
            let m = g.constant(mu_id.clone());
            loss_mi(g, m, groups)
        }))
    }
}
