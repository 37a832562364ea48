//! Per-subject pseudo-neutral meshes learned by exponential moving average.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WsdfError};
use crate::mesh::FaceMesh;

pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    /// Flat `(V·3)` mesh in normalised model space.
    pub mesh: Array1<f64>,
    pub update_count: u64,
}

/// Subject id -> pseudo-neutral mesh. Entries are plain arrays and never
/// take part in gradient computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralBank {
    beta: f64,
    entries: BTreeMap<String, BankEntry>,
}

impl NeutralBank {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(WsdfError::Validation(format!("EMA decay {beta} must lie in (0, 1)")));
        }
        Ok(Self { beta, entries: BTreeMap::new() })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn get(&self, subject: &str) -> Option<&BankEntry> {
        self.entries.get(subject)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BankEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Restores an entry verbatim (checkpoint loading).
    pub fn insert(&mut self, subject: impl Into<String>, entry: BankEntry) -> Result<()> {
        if entry.mesh.iter().any(|x| !x.is_finite()) {
            return Err(WsdfError::Validation("bank mesh must be finite".into()));
        }
        self.entries.insert(subject.into(), entry);
        Ok(())
    }

    /// First call for a subject stores the batch mean; later calls apply
    /// `B ← β B + (1 − β) mean(batch)`. Rows of `recon` are flat meshes.
    pub fn update(&mut self, subject: &str, recon: ArrayView2<'_, f64>) -> Result<()> {
        if recon.nrows() == 0 {
            return Err(WsdfError::Validation(format!("empty reconstruction batch for subject {subject}")));
        }
        let mean = recon.mean_axis(Axis(0)).expect("non-empty");
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(WsdfError::Numerical(format!("non-finite reconstruction for subject {subject}")));
        }
        match self.entries.get_mut(subject) {
            Some(entry) => {
                if entry.mesh.len() != mean.len() {
                    return Err(WsdfError::Shape(format!(
                        "bank entry for {subject} has {} values, batch has {}",
                        entry.mesh.len(),
                        mean.len()
                    )));
                }
                let b = self.beta;
                entry.mesh.zip_mut_with(&mean, |e, &m| *e = b * *e + (1.0 - b) * m);
                entry.update_count += 1;
            }
            None => {
                self.entries.insert(subject.to_owned(), BankEntry { mesh: mean, update_count: 1 });
            }
        }
        Ok(())
    }
}

/// Confidence of a bank entry built from `scan_count` scans: `1 − e^{1 − |K|}`.
pub fn confidence(scan_count: usize) -> Result<f64> {
    if scan_count < 1 {
        return Err(WsdfError::Validation("confidence needs at least one scan".into()));
    }
    Ok(1.0 - (1.0 - scan_count as f64).exp())
}

/// Least-squares split of a subject's scans into a shared neutral and
/// per-scan offsets.
#[derive(Debug, Clone)]
pub struct PseudoNeutralSolution {
    pub neutral: FaceMesh,
    pub deltas: Vec<Array2<f64>>,
}

/// Minimiser of `Σ‖δ_i‖²` subject to `s + δ_i = X_i`: `s` is the mean scan.
pub fn solve_pseudo_neutral(scans: &[FaceMesh]) -> Result<PseudoNeutralSolution> {
    let first = scans
        .first()
        .ok_or_else(|| WsdfError::Validation("pseudo-neutral needs at least one scan".into()))?;
    let mut sum = Array2::<f64>::zeros(first.vertices().dim());
    for s in scans {
        if !s.same_topology(first) {
            return Err(WsdfError::Shape("scans do not share a topology".into()));
        }
        sum += &s.vertices();
    }
    let mean = sum / scans.len() as f64;
    let deltas = scans.iter().map(|s| &s.vertices() - &mean).collect();
    Ok(PseudoNeutralSolution { neutral: first.with_vertices(mean)?, deltas })
}

/// Convenience view of a flat bank mesh as `(V, 3)`.
pub fn as_vertices(flat: ArrayView1<'_, f64>) -> Array2<f64> {
    Array2::from_shape_vec((flat.len() / 3, 3), flat.to_vec()).expect("length divisible by 3")
}
