//! Checkpoint container: `WSDFCK1\0`, u32 version, u64 header length, a
//! JSON header, then every tensor as little-endian f64.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::{TrainConfig, TrainedModel};
use crate::autodiff::Mat;
use crate::error::{Result, WsdfError};
use crate::mesh::{NormalizationStats, TopologyTemplate};
use crate::networks::WsdfModel;
use crate::neutral_bank::{BankEntry, NeutralBank};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WSDFCK1\0";
const VERSION: u32 = 1;

/// Everything needed to evaluate or resume a run bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub trained: TrainedModel,
    pub optimizer: AdamW,
    pub bank: NeutralBank,
    pub step: u64,
    pub sampler_pos: u128,
    pub noise_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    subject: String,
    update_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    spiral_len: usize,
    norm_scale: f64,
    step: u64,
    optimizer_step: u64,
    sampler_pos: String,
    noise_pos: String,
    bank_beta: f64,
    bank: Vec<BankIndex>,
    tensors: Vec<TensorIndex>,
}

struct Payload {
    index: Vec<TensorIndex>,
    data: Vec<f64>,
}

impl Payload {
    fn push(&mut self, name: String, m: &Mat) {
        self.index.push(TensorIndex { name, rows: m.nrows(), cols: m.ncols(), offset: self.data.len() });
        self.data.extend(m.iter());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.trained.model;
        let mut payload = Payload { index: Vec::new(), data: Vec::new() };
        payload.push("norm.mean".into(), &self.trained.norm.mean);
        for (_, name, m) in model.params().iter() {
            payload.push(format!("param.{name}"), m);
        }
        for (((_, name, _), m), v) in model.params().iter().zip(&self.optimizer.m).zip(&self.optimizer.v) {
            payload.push(format!("adam.m.{name}"), m);
            payload.push(format!("adam.v.{name}"), v);
        }
        let mut bank = Vec::new();
        for (subject, entry) in self.bank.iter() {
            let row = entry.mesh.view().insert_axis(ndarray::Axis(0)).to_owned();
            payload.push(format!("bank.{subject}"), &row);
            bank.push(BankIndex { subject: subject.to_owned(), update_count: entry.update_count });
        }
        let topo = model.topology();
        let header = Header {
            config: self.trained.config.clone(),
            vertex_count: topo.vertex_count(),
            faces: topo.faces().to_vec(),
            spiral_len: topo.spiral_len(),
            norm_scale: self.trained.norm.scale,
            step: self.step,
            optimizer_step: self.optimizer.step,
            sampler_pos: self.sampler_pos.to_string(),
            noise_pos: self.noise_pos.to_string(),
            bank_beta: self.bank.beta(),
            bank,
            tensors: payload.index,
        };
        let json = serde_json::to_vec(&header).map_err(|e| WsdfError::Validation(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.data.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in payload.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| WsdfError::parse(origin, m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let raw = &bytes[20 + hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = |name: &str| -> Result<Mat> {
            let t = header.tensors.iter().find(|t| t.name == name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
            let slice = data.get(t.offset..t.offset + t.rows * t.cols).ok_or_else(|| bad("tensor outside payload"))?;
            Ok(Mat::from_shape_vec((t.rows, t.cols), slice.to_vec()).expect("sizes checked"))
        };

        let topology = Arc::new(TopologyTemplate::new(header.vertex_count, header.faces.clone(), header.spiral_len)?);
        let mut model = WsdfModel::new(header.config.model.clone(), topology, header.config.seed)?;
        let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_owned()).collect();
        for name in &names {
            model.params_mut().set_by_name(name, tensor(&format!("param.{name}"))?)?;
        }
        let norm = NormalizationStats::new(tensor("norm.mean")?, header.norm_scale)?;
        let mut optimizer = AdamW::new(header.config.optimizer, model.params());
        optimizer.step = header.optimizer_step;
        for (k, name) in names.iter().enumerate() {
            optimizer.m[k] = tensor(&format!("adam.m.{name}"))?;
            optimizer.v[k] = tensor(&format!("adam.v.{name}"))?;
        }
        let mut bank = NeutralBank::new(header.bank_beta)?;
        for b in &header.bank {
            let row = tensor(&format!("bank.{}", b.subject))?;
            bank.insert(b.subject.clone(), BankEntry { mesh: row.row(0).to_owned(), update_count: b.update_count })?;
        }
        let pos = |s: &str| s.parse::<u128>().map_err(|e| bad(&e.to_string()));
        Ok(Self {
            trained: TrainedModel { config: header.config, model, norm },
            optimizer,
            bank,
            step: header.step,
            sampler_pos: pos(&header.sampler_pos)?,
            noise_pos: pos(&header.noise_pos)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| WsdfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| WsdfError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
