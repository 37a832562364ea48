//! Registered scans on disk: `<subject_id>/<scan>.obj` trees and split
//! manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use super::DatasetSplit;
use crate::error::{Result, WsdfError};
use crate::mesh::io::read_obj_mesh;
use crate::mesh::{FaceMesh, ScanRecord, TopologyTemplate};

#[derive(Debug, Clone)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub split: DatasetSplit,
    pub rejected: Vec<Rejection>,
}

/// Loads every `<subject_id>/<scan>.obj` under `root` into the training
/// side of the split. Files that fail to parse or do not match `topology`
/// are collected in the rejection list instead of aborting.
pub fn load_registered_dataset(root: &Path, topology: &Arc<TopologyTemplate>) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for subject_dir in sorted_entries(root)? {
        if !subject_dir.is_dir() {
            continue;
        }
        let subject = match subject_dir.file_name().and_then(|n| n.to_str()) {
            Some(s) => s.to_owned(),
            None => continue,
        };
        for file in sorted_entries(&subject_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("obj") {
                continue;
            }
            match read_obj_mesh(&file, topology) {
                Ok(mesh) => {
                    let tag = file.display().to_string();
                    report.split.train.push(ScanRecord::new(mesh, subject.clone(), None, tag)?);
                }
                Err(e) => {
                    log::warn!("rejecting {}: {e}", file.display());
                    report.rejected.push(Rejection { path: file, reason: e.to_string() });
                }
            }
        }
    }
    if report.split.train.is_empty() {
        log::warn!("no registered scans found under {}", root.display());
    }
    Ok(report)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| WsdfError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| WsdfError::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
    /// Ground-truth neutral of a subject, used by evaluation only.
    Neutral,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
            SplitKind::Neutral => "neutral",
        })
    }
}

impl FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            "neutral" => Ok(SplitKind::Neutral),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One manifest line: `subject_id<TAB>path<TAB>split[<TAB>expression]`.
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub path: PathBuf,
    pub split: SplitKind,
    pub expression_label: Option<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| WsdfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| WsdfError::io(path, e);
    writeln!(w, "# subject_id\tpath\tsplit\texpression").map_err(io)?;
    for e in entries {
        write!(w, "{}\t{}\t{}", e.subject_id, e.path.display(), e.split).map_err(io)?;
        if let Some(label) = &e.expression_label {
            write!(w, "\t{label}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| WsdfError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WsdfError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) || fields[0].is_empty() {
            return Err(WsdfError::parse(path, format!("line {}: expected 3 or 4 tab-separated fields", n + 1)));
        }
        let split = fields[2].parse().map_err(|e| WsdfError::parse(path, format!("line {}: {e}", n + 1)))?;
        out.push(ManifestEntry {
            subject_id: fields[0].to_owned(),
            path: PathBuf::from(fields[1]),
            split,
            expression_label: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ManifestDataset {
    pub split: DatasetSplit,
    pub ground_truth: BTreeMap<String, FaceMesh>,
}

/// Loads the meshes listed in a manifest. Unlike directory loading, a bad
/// file is an error: the manifest asserts the files are valid.
pub fn load_manifest_dataset(path: &Path, topology: &Arc<TopologyTemplate>) -> Result<ManifestDataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut split = DatasetSplit::default();
    let mut ground_truth = BTreeMap::new();
    for entry in read_manifest(path)? {
        let mesh = read_obj_mesh(&base.join(&entry.path), topology)?;
        if entry.split == SplitKind::Neutral {
            ground_truth.insert(entry.subject_id, mesh);
            continue;
        }
        let tag = entry.path.display().to_string();
        let rec = ScanRecord::new(mesh, entry.subject_id.clone(), entry.expression_label, tag)?;
        match entry.split {
            SplitKind::Train => split.train.push(rec),
            SplitKind::Test => {
                split.held_out_subjects.insert(entry.subject_id);
                split.test.push(rec);
            }
            SplitKind::Neutral => unreachable!("handled above"),
        }
    }
    Ok(ManifestDataset { split, ground_truth })
}
