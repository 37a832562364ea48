//! Training configuration, read from TOML.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, load_manifest_dataset, load_registered_dataset, pca_quality_filter, DatasetSplit,
    SamplerConfig, SyntheticConfig, SyntheticFactorSpec,
};
use crate::error::{Result, WsdfError};
use crate::evaluation::EvalProtocol;
use crate::losses::LossWeights;
use crate::mesh::io::read_obj;
use crate::mesh::{FaceMesh, TopologyTemplate, DEFAULT_SPIRAL_LEN};
use crate::networks::ModelConfig;
use crate::neutral_bank::DEFAULT_BETA;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    #[default]
    Synthetic,
    /// `<subject>/<scan>.obj` tree.
    Directory,
    /// Split manifest with optional ground-truth neutrals.
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synthetic: SyntheticConfig,
    /// Directory root or manifest file.
    pub path: Option<PathBuf>,
    /// OBJ whose faces define the shared topology.
    pub template: Option<PathBuf>,
    /// Subject fraction held out when loading a directory.
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Fraction of training scans removed by the PCA filter.
    pub pca_drop_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            synthetic: SyntheticConfig::default(),
            path: None,
            template: None,
            test_fraction: 0.3,
            split_seed: 0,
            pca_drop_fraction: 0.0,
        }
    }
}

/// Scans plus the topology they live on.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub topology: Arc<TopologyTemplate>,
    pub split: DatasetSplit,
    pub ground_truth: BTreeMap<String, FaceMesh>,
}

impl DataConfig {
    fn require(&self, what: &str, v: &Option<PathBuf>) -> Result<PathBuf> {
        v.clone().ok_or_else(|| WsdfError::Config(format!("data.{what} is required for {:?} data", self.kind)))
    }

    pub fn load(&self) -> Result<LoadedData> {
        let mut data = match self.kind {
            DataKind::Synthetic => {
                let spec = SyntheticFactorSpec::from_config(&self.synthetic)?;
                let d = generate_synthetic(&spec)?;
                LoadedData { topology: spec.topology, split: d.split, ground_truth: d.ground_truth }
            }
            DataKind::Directory => {
                let topology = load_template(&self.require("template", &self.template)?)?;
                let report = load_registered_dataset(&self.require("path", &self.path)?, &topology)?;
                for r in &report.rejected {
                    log::warn!("rejected {}: {}", r.path.display(), r.reason);
                }
                let split = DatasetSplit::subject_disjoint(report.split.train, self.test_fraction, self.split_seed)?;
                LoadedData { topology, split, ground_truth: BTreeMap::new() }
            }
            DataKind::Manifest => {
                let topology = load_template(&self.require("template", &self.template)?)?;
                let d = load_manifest_dataset(&self.require("path", &self.path)?, &topology)?;
                LoadedData { topology, split: d.split, ground_truth: d.ground_truth }
            }
        };
        if self.pca_drop_fraction > 0.0 && data.split.train.len() >= 2 {
            let before = data.split.train.len();
            data.split.train = pca_quality_filter(std::mem::take(&mut data.split.train), self.pca_drop_fraction)?;
            log::info!("PCA filter kept {} of {before} training scans", data.split.train.len());
        }
        if data.split.train.is_empty() {
            return Err(WsdfError::Data("no training scans".into()));
        }
        Ok(data)
    }
}

pub fn load_template(path: &Path) -> Result<Arc<TopologyTemplate>> {
    let obj = read_obj(path)?;
    Ok(Arc::new(TopologyTemplate::new(obj.vertices.nrows(), obj.faces, DEFAULT_SPIRAL_LEN)?))
}

/// Which optional objectives are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub enable_neutral_bank: bool,
    pub enable_jac: bool,
    pub enable_mi: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { enable_neutral_bank: true, enable_jac: true, enable_mi: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// EMA decay of the neutral bank.
    pub bank_beta: f64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    pub ablation: AblationFlags,
    pub eval: EvalProtocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            checkpoint_every: 0,
            bank_beta: DEFAULT_BETA,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            sampler: SamplerConfig::default(),
            ablation: AblationFlags::default(),
            eval: EvalProtocol::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WsdfError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", o.learning_rate));
        }
        if !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("invalid optimizer settings".into());
        }
        if !(self.bank_beta > 0.0 && self.bank_beta < 1.0) {
            return bad(format!("bank_beta {} must lie in (0, 1)", self.bank_beta));
        }
        if !(0.0..1.0).contains(&self.data.pca_drop_fraction) || !(0.0..1.0).contains(&self.data.test_fraction) {
            return bad("data fractions must lie in [0, 1)".into());
        }
        if self.sampler.ids_per_batch == 0 || self.sampler.scans_per_id == 0 {
            return bad("sampler needs positive group sizes".into());
        }
        self.data.synthetic.validate()?;
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| WsdfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| WsdfError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| WsdfError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| WsdfError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `dotted.key=value` override, the value parsed as TOML
    /// (bare words are taken as strings).
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| WsdfError::Config(format!("override '{assignment}' is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").expect("parsed key"))
            .unwrap_or_else(|_| toml::Value::String(raw.trim().to_owned()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| WsdfError::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for part in key.trim().split('.') {
            slot = slot
                .as_table_mut()
                .ok_or_else(|| WsdfError::Config(format!("'{key}' does not name a config field")))?
                .entry(part)
                .or_insert(toml::Value::Table(Default::default()));
        }
        *slot = value;
        let updated: Self = doc.try_into().map_err(|e: toml::de::Error| WsdfError::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Stable short hash of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        crate::evaluation::fingerprint(self.to_toml().unwrap_or_default().as_bytes())
    }
}
