//! Scan collections: synthetic generation, loading from disk, quality
//! filtering and identity-aware batching.

mod loader;
mod pca;
mod sampler;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WsdfError};
use crate::mesh::ScanRecord;

pub use loader::{
    load_manifest_dataset, load_registered_dataset, read_manifest, write_manifest, LoadReport, ManifestDataset, ManifestEntry,
    Rejection, SplitKind,
};
pub use pca::{heldout_residuals, pca_quality_filter, DEFAULT_DROP_FRACTION, DEFAULT_VARIANCE_KEPT};
pub use sampler::{batches_per_epoch, Batch, BatchSampler, SamplerConfig, SubjectGroup, TrainScan, TrainSet};
pub use synthetic::{
    expression_name, generate_synthetic, subject_name, SyntheticConfig, SyntheticDataset, SyntheticFactorSpec,
    SYNTHETIC_SOURCE,
};

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ScanRecord>,
    pub test: Vec<ScanRecord>,
    pub held_out_subjects: BTreeSet<String>,
}

impl DatasetSplit {
    /// Moves a random `test_fraction` of subjects (rounded) to the test side.
    pub fn subject_disjoint(records: Vec<ScanRecord>, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(WsdfError::Config(format!("test fraction {test_fraction} must lie in [0, 1)")));
        }
        let mut subjects: Vec<String> =
            records.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * subjects.len() as f64).round() as usize;
        let held_out: BTreeSet<String> = subjects.into_iter().take(n_test).collect();
        let (test, train) = records.into_iter().partition(|r| held_out.contains(&r.subject_id));
        Ok(Self { train, test, held_out_subjects: held_out })
    }

    pub fn is_subject_disjoint(&self) -> bool {
        let train: BTreeSet<&str> = self.train.iter().map(|r| r.subject_id.as_str()).collect();
        self.test.iter().all(|r| !train.contains(r.subject_id.as_str()))
    }
}

/// Groups record indices by subject.
pub fn group_by_subject(records: &[ScanRecord]) -> BTreeMap<&str, Vec<usize>> {
    let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        out.entry(r.subject_id.as_str()).or_default().push(i);
    }
    out
}

#[cfg(test)]
mod tests;
