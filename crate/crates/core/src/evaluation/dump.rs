//! Per-sample evaluation output, written so that every reported metric can
//! be recomputed without the model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Inference, Sample};
use crate::error::{Result, WsdfError};
use crate::mesh::io::{read_mesh_batch, write_mesh_batch_f64};
use crate::mesh::{FaceMesh, ScanRecord, TopologyTemplate};

pub const METRIC_NAMES: [&str; 4] = ["avd", "id", "exp", "neu"];

#[derive(Debug, Clone)]
pub struct PerSampleDump {
    pub subjects: Vec<String>,
    pub expression_labels: Vec<Option<String>>,
    pub inputs: Vec<FaceMesh>,
    pub reconstructions: Vec<FaceMesh>,
    pub neutralized: Vec<FaceMesh>,
    pub expression_only: Vec<FaceMesh>,
    /// Ground-truth neutral per subject, where known.
    pub ground_truth: BTreeMap<String, FaceMesh>,
    /// Metric name -> per-unit values, in [`METRIC_NAMES`] order.
    pub samples: BTreeMap<String, Vec<Sample>>,
}

impl PerSampleDump {
    pub(crate) fn collect(
        records: &[ScanRecord],
        inf: &Inference,
        ground_truth: Option<&BTreeMap<String, FaceMesh>>,
        samples: [Vec<Sample>; 4],
    ) -> Self {
        let subjects: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        let truth = ground_truth
            .map(|gt| {
                gt.iter()
                    .filter(|(k, _)| subjects.contains(k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect()
            })
            .unwrap_or_default();
        Self {
            expression_labels: records.iter().map(|r| r.expression_label.clone()).collect(),
            subjects,
            inputs: records.iter().map(|r| r.mesh.clone()).collect(),
            reconstructions: inf.reconstructions.clone(),
            neutralized: inf.neutralized.clone(),
            expression_only: inf.expression_only.clone(),
            ground_truth: truth,
            samples: METRIC_NAMES.iter().map(|s| s.to_string()).zip(samples).collect(),
        }
    }

    /// Writes `scans.tsv`, `samples.tsv`, `truth.tsv` and lossless mesh
    /// batches into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| WsdfError::io(dir, e))?;
        let lines = self.subjects.iter().zip(&self.expression_labels).enumerate().map(|(i, (s, l))| {
            format!("{i}\t{s}\t{}", l.as_deref().unwrap_or(""))
        });
        write_lines(&dir.join("scans.tsv"), "index\tsubject_id\texpression", lines)?;
        let lines = self.samples.iter().flat_map(|(m, v)| v.iter().map(move |s| format!("{m}\t{}\t{:?}", s.key, s.value)));
        write_lines(&dir.join("samples.tsv"), "metric\tkey\tvalue", lines)?;
        write_lines(&dir.join("truth.tsv"), "subject_id", self.ground_truth.keys().cloned())?;
        write_mesh_batch_f64(&dir.join("inputs.wmb"), &self.inputs)?;
        write_mesh_batch_f64(&dir.join("reconstructions.wmb"), &self.reconstructions)?;
        write_mesh_batch_f64(&dir.join("neutralized.wmb"), &self.neutralized)?;
        write_mesh_batch_f64(&dir.join("expression_only.wmb"), &self.expression_only)?;
        let truth: Vec<FaceMesh> = self.ground_truth.values().cloned().collect();
        write_mesh_batch_f64(&dir.join("truth.wmb"), &truth)
    }

    pub fn read(dir: &Path, topology: &Arc<TopologyTemplate>) -> Result<Self> {
        let mut subjects = Vec::new();
        let mut expression_labels = Vec::new();
        for fields in read_rows(&dir.join("scans.tsv"), 3)? {
            subjects.push(fields[1].clone());
            expression_labels.push((!fields[2].is_empty()).then(|| fields[2].clone()));
        }
        let mut samples: BTreeMap<String, Vec<Sample>> =
            METRIC_NAMES.iter().map(|m| (m.to_string(), Vec::new())).collect();
        let path = dir.join("samples.tsv");
        for fields in read_rows(&path, 3)? {
            let value = fields[2].parse().map_err(|e| WsdfError::parse(&path, format!("{e}")))?;
            samples.entry(fields[0].clone()).or_default().push(Sample { key: fields[1].clone(), value });
        }
        let truth_ids: Vec<String> = read_rows(&dir.join("truth.tsv"), 1)?.into_iter().map(|mut f| f.remove(0)).collect();
        let meshes = |name: &str| read_mesh_batch(&dir.join(name), topology);
        let truth = meshes("truth.wmb")?;
        if truth.len() != truth_ids.len() {
            return Err(WsdfError::parse(dir.join("truth.tsv"), "truth ids and meshes differ in count"));
        }
        let dump = Self {
            subjects,
            expression_labels,
            inputs: meshes("inputs.wmb")?,
            reconstructions: meshes("reconstructions.wmb")?,
            neutralized: meshes("neutralized.wmb")?,
            expression_only: meshes("expression_only.wmb")?,
            ground_truth: truth_ids.into_iter().zip(truth).collect(),
            samples,
        };
        let n = dump.subjects.len();
        if [&dump.inputs, &dump.reconstructions, &dump.neutralized, &dump.expression_only].iter().any(|v| v.len() != n) {
            return Err(WsdfError::parse(dir, "mesh batches do not match the scan list"));
        }
        Ok(dump)
    }
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| WsdfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| WsdfError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for l in lines {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_rows(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(|e| WsdfError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| WsdfError::io(path, e))?;
        let row: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if row.len() != fields {
            return Err(WsdfError::parse(path, format!("line {}: expected {fields} fields", n + 1)));
        }
        out.push(row);
    }
    Ok(out)
}
