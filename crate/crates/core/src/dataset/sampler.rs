//! Identity-aware batch sampling.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WsdfError};
use crate::mesh::{FaceMesh, ScanRecord};

/// What the training loop sees of a scan. There is deliberately no
/// expression field.
#[derive(Debug, Clone)]
pub struct TrainScan {
    pub subject_id: String,
    pub mesh: FaceMesh,
}

/// Training scans indexed by subject.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    scans: Vec<TrainScan>,
    by_subject: BTreeMap<String, Vec<usize>>,
}

impl TrainSet {
    /// Drops every label except the subject id.
    pub fn from_records(records: &[ScanRecord]) -> Self {
        let scans = records
            .iter()
            .map(|r| TrainScan { subject_id: r.subject_id.clone(), mesh: r.mesh.clone() })
            .collect();
        Self::new(scans)
    }

    pub fn new(scans: Vec<TrainScan>) -> Self {
        let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in scans.iter().enumerate() {
            by_subject.entry(s.subject_id.clone()).or_default().push(i);
        }
        Self { scans, by_subject }
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn scan(&self, i: usize) -> &TrainScan {
        &self.scans[i]
    }

    pub fn scans(&self) -> &[TrainScan] {
        &self.scans
    }

    pub fn subject_count(&self) -> usize {
        self.by_subject.len()
    }

    /// Scans per subject in the whole set.
    pub fn scan_count(&self, subject: &str) -> usize {
        self.by_subject.get(subject).map_or(0, Vec::len)
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.by_subject.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub ids_per_batch: usize,
    pub scans_per_id: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ids_per_batch: 8, scans_per_id: 4, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.scans_per_id
    }
}

/// Scans of one subject inside a batch, as indices into the [`TrainSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectGroup {
    pub subject_id: String,
    pub scans: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub groups: Vec<SubjectGroup>,
}

impl Batch {
    /// Scan indices in group order.
    pub fn indices(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.scans.iter().copied()).collect()
    }

    /// Row ranges of each group within [`Batch::indices`].
    pub fn group_rows(&self) -> Vec<Vec<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let rows = (start..start + g.scans.len()).collect();
                start += g.scans.len();
                rows
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.scans.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `⌈#scans / batch size⌉`
pub fn batches_per_epoch(scan_count: usize, batch_size: usize) -> usize {
    scan_count.div_ceil(batch_size.max(1)).max(1)
}

/// Endless stream of batches: `ids_per_batch` distinct subjects, each with
/// `scans_per_id` scans drawn without replacement when the subject has
/// enough of them and with replacement otherwise.
pub struct BatchSampler {
    subjects: Vec<(String, Vec<usize>)>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(set: &TrainSet, cfg: SamplerConfig) -> Result<Self> {
        if cfg.ids_per_batch == 0 || cfg.scans_per_id == 0 {
            return Err(WsdfError::Config("batch needs at least one subject and one scan per subject".into()));
        }
        if set.subject_count() < cfg.ids_per_batch {
            return Err(WsdfError::Config(format!(
                "{} subjects available, batch needs {}",
                set.subject_count(),
                cfg.ids_per_batch
            )));
        }
        let subjects = set.subjects().map(|(k, v)| (k.to_owned(), v.to_vec())).collect();
        Ok(Self { subjects, cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed) })
    }

    pub fn config(&self) -> SamplerConfig {
        self.cfg
    }

    pub fn next_batch(&mut self) -> Batch {
        let picks: Vec<usize> =
            rand::seq::index::sample(&mut self.rng, self.subjects.len(), self.cfg.ids_per_batch).into_vec();
        let n_per = self.cfg.scans_per_id;
        let groups = picks
            .into_iter()
            .map(|s| {
                let (id, pool) = &self.subjects[s];
                let scans = if pool.len() >= n_per {
                    pool.choose_multiple(&mut self.rng, n_per).copied().collect()
                } else {
                    (0..n_per).map(|_| pool[self.rng.random_range(0..pool.len())]).collect()
                };
                SubjectGroup { subject_id: id.clone(), scans }
            })
            .collect();
        Batch { groups }
    }

    /// Position in the random stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

impl Iterator for BatchSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
