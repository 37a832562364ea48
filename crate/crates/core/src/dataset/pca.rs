//! PCA-based rejection of poorly registered scans.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Result, WsdfError};
use crate::mesh::ScanRecord;

pub const DEFAULT_DROP_FRACTION: f64 = 0.05;
pub const DEFAULT_VARIANCE_KEPT: f64 = 0.98;

const MAX_FOLDS: usize = 10;

/// Residual of every scan under a PCA fitted without it.
///
/// Scans are assigned round-robin to at most ten folds; each fold is scored
/// against components fitted on the remaining folds. A gross outlier would
/// otherwise claim a principal component of its own and reconstruct itself
/// perfectly.
pub fn heldout_residuals(flat: &[Vec<f64>], variance_kept: f64) -> Result<Vec<f64>> {
    let n = flat.len();
    if n < 2 {
        return Err(WsdfError::Validation("PCA filtering needs at least two scans".into()));
    }
    let dim = flat[0].len();
    if flat.iter().any(|x| x.len() != dim) {
        return Err(WsdfError::Shape("scans differ in length".into()));
    }
    let folds = n.min(MAX_FOLDS);
    let mut residuals = vec![0.0; n];
    for fold in 0..folds {
        let fit: Vec<&Vec<f64>> = (0..n).filter(|i| i % folds != fold).map(|i| &flat[i]).collect();
        let model = PcaModel::fit(&fit, variance_kept);
        for i in (0..n).filter(|i| i % folds == fold) {
            residuals[i] = model.residual(&flat[i]);
        }
    }
    Ok(residuals)
}

struct PcaModel {
    mean: Vec<f64>,
    /// Orthonormal component vectors.
    components: Vec<Vec<f64>>,
}

impl PcaModel {
    fn fit(rows: &[&Vec<f64>], variance_kept: f64) -> Self {
        let m = rows.len();
        let dim = rows[0].len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (acc, x) in mean.iter_mut().zip(r.iter()) {
                *acc += x / m as f64;
            }
        }
        let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect()).collect();
        // eigenvectors of the m×m Gram matrix give the components cheaply
        let gram = DMatrix::from_fn(m, m, |i, j| dot(&centred[i], &centred[j]));
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().filter(|l| **l > 0.0).sum();
        let mut components = Vec::new();
        let mut kept = 0.0;
        for &j in &order {
            let lambda = eig.eigenvalues[j];
            if total <= 0.0 || lambda <= total * 1e-12 || kept >= variance_kept * total {
                break;
            }
            let mut v = vec![0.0; dim];
            for (i, row) in centred.iter().enumerate() {
                let u = eig.eigenvectors[(i, j)];
                for (acc, x) in v.iter_mut().zip(row) {
                    *acc += u * x;
                }
            }
            let norm = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            components.push(v);
            kept += lambda;
        }
        Self { mean, components }
    }

    fn residual(&self, x: &[f64]) -> f64 {
        let mut r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for c in &self.components {
            let coef = dot(&r, c);
            r.iter_mut().zip(c).for_each(|(ri, ci)| *ri -= coef * ci);
        }
        dot(&r, &r).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Drops the `⌊drop_fraction · n⌋` scans with the largest held-out PCA
/// residual, keeping the input order of the survivors.
pub fn pca_quality_filter(scans: Vec<ScanRecord>, drop_fraction: f64) -> Result<Vec<ScanRecord>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(WsdfError::Validation(format!("drop fraction {drop_fraction} must lie in [0, 1)")));
    }
    let n_drop = (drop_fraction * scans.len() as f64).floor() as usize;
    if n_drop == 0 {
        return Ok(scans);
    }
    let flat: Vec<Vec<f64>> = scans.iter().map(|s| s.mesh.flat()).collect();
    let residuals = heldout_residuals(&flat, DEFAULT_VARIANCE_KEPT)?;
    let mut rank: Vec<usize> = (0..scans.len()).collect();
    rank.sort_by(|&a, &b| residuals[b].total_cmp(&residuals[a]).then(a.cmp(&b)));
    let dropped: std::collections::BTreeSet<usize> = rank[..n_drop].iter().copied().collect();
    for &i in &dropped {
        log::info!(
            "PCA filter drops {} ({}) with residual {:.4}",
            scans[i].subject_id,
            scans[i].source_tag,
            residuals[i]
        );
    }
    Ok(scans.into_iter().enumerate().filter(|(i, _)| !dropped.contains(i)).map(|(_, s)| s).collect())
}
