//! Reconstruction, disentanglement and neutralization metrics, latent
//! interpolation and export.

pub mod dump;
pub mod figures;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WsdfError};
use crate::mesh::{average_vertex_distance, FaceMesh, ScanRecord};

pub use dump::PerSampleDump;

/// Anything that maps scans to posterior means and codes back to meshes,
/// in the scans' own coordinates.
pub trait FaceAutoencoder {
    fn latent_dims(&self) -> (usize, usize);

    /// Posterior means, `(n, d_id)` and `(n, d_exp)`.
    fn encode(&self, scans: &[&FaceMesh]) -> Result<(Array2<f64>, Array2<f64>)>;

    fn decode(&self, z_id: &Array2<f64>, z_exp: &Array2<f64>) -> Result<Vec<FaceMesh>>;
}

/// How expression samples are stripped of identity before comparing them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentityRemoval {
    /// Decode with the zero identity code.
    #[default]
    ZeroCode,
    /// Decode with the mean identity code of all evaluated scans.
    MeanCode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub identity_removal: IdentityRemoval,
}

/// Model outputs for every evaluated scan, in input order.
#[derive(Debug, Clone)]
pub struct Inference {
    pub mu_id: Array2<f64>,
    pub mu_exp: Array2<f64>,
    pub reconstructions: Vec<FaceMesh>,
    /// Decoded with a zero expression code.
    pub neutralized: Vec<FaceMesh>,
    /// Decoded with the canonical identity code.
    pub expression_only: Vec<FaceMesh>,
}

impl Inference {
    pub fn run(model: &dyn FaceAutoencoder, records: &[ScanRecord], protocol: &EvalProtocol) -> Result<Self> {
        if records.is_empty() {
            return Err(WsdfError::Data("evaluation set is empty".into()));
        }
        let scans: Vec<&FaceMesh> = records.iter().map(|r| &r.mesh).collect();
        let (mu_id, mu_exp) = model.encode(&scans)?;
        let n = records.len();
        let reconstructions = model.decode(&mu_id, &mu_exp)?;
        let neutralized = model.decode(&mu_id, &Array2::zeros(mu_exp.dim()))?;
        let canonical = match protocol.identity_removal {
            IdentityRemoval::ZeroCode => Array2::zeros(mu_id.dim()),
            IdentityRemoval::MeanCode => {
                let mean = mu_id.mean_axis(Axis(0)).expect("non-empty");
                mean.broadcast((n, mu_id.ncols())).expect("row broadcast").to_owned()
            }
        };
        let expression_only = model.decode(&canonical, &mu_exp)?;
        Ok(Self { mu_id, mu_exp, reconstructions, neutralized, expression_only })
    }
}

/// Population standard deviation (divide by `n`) of the distances from
/// every vertex of every mesh to the same vertex of the group mean.
pub fn compactness(meshes: &[&FaceMesh]) -> Result<f64> {
    let first = meshes.first().ok_or_else(|| WsdfError::Validation("empty group".into()))?;
    let mut mean = Array2::<f64>::zeros(first.vertices().dim());
    for m in meshes {
        if !m.same_topology(first) {
            return Err(WsdfError::Shape("group meshes differ in topology".into()));
        }
        mean += &m.vertices();
    }
    mean /= meshes.len() as f64;
    let mut distances = Vec::with_capacity(meshes.len() * mean.nrows());
    for m in meshes {
        for (p, q) in m.vertices().axis_iter(Axis(0)).zip(mean.axis_iter(Axis(0))) {
            distances.push((&p - &q).mapv(|d| d * d).sum().sqrt());
        }
    }
    let mu = distances.iter().sum::<f64>() / distances.len() as f64;
    let var = distances.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / distances.len() as f64;
    Ok(var.sqrt())
}

/// One value per evaluated unit (scan, subject or expression).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub key: String,
    pub value: f64,
}

/// Per-scan `AVD(X, x_rec)`.
pub fn metric_avd(records: &[ScanRecord], inf: &Inference) -> Result<Vec<Sample>> {
    records
        .iter()
        .zip(&inf.reconstructions)
        .enumerate()
        .map(|(i, (r, x))| Ok(Sample { key: i.to_string(), value: average_vertex_distance(&r.mesh, x)? }))
        .collect()
}

fn grouped_compactness<'a>(
    keys: impl Iterator<Item = Option<&'a str>>,
    meshes: &[FaceMesh],
) -> Result<Vec<Sample>> {
    let mut groups: BTreeMap<&str, Vec<&FaceMesh>> = BTreeMap::new();
    for (k, m) in keys.zip(meshes) {
        if let Some(k) = k {
            groups.entry(k).or_default().push(m);
        }
    }
    groups
        .into_iter()
        .filter(|(_, g)| g.len() >= 2)
        .map(|(k, g)| Ok(Sample { key: k.to_owned(), value: compactness(&g)? }))
        .collect()
}

/// Per-subject compactness of the neutralized outputs; subjects with a
/// single scan are skipped.
pub fn metric_id(records: &[ScanRecord], inf: &Inference) -> Result<Vec<Sample>> {
    grouped_compactness(records.iter().map(|r| Some(r.subject_id.as_str())), &inf.neutralized)
}

/// Per-expression compactness of identity-removed outputs; unlabeled scans
/// and singleton expressions are skipped.
pub fn metric_exp(records: &[ScanRecord], inf: &Inference) -> Result<Vec<Sample>> {
    grouped_compactness(records.iter().map(|r| r.expression_label.as_deref()), &inf.expression_only)
}

/// Per-scan `AVD(X_neu, x_neu)` for subjects with a known neutral.
pub fn metric_neu(
    records: &[ScanRecord],
    inf: &Inference,
    ground_truth: &BTreeMap<String, FaceMesh>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, (r, x)) in records.iter().zip(&inf.neutralized).enumerate() {
        if let Some(truth) = ground_truth.get(&r.subject_id) {
            out.push(Sample { key: i.to_string(), value: average_vertex_distance(truth, x)? });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self { mean, median: median(values), count: values.len() })
    }

    fn of_samples(samples: &[Sample]) -> Option<Self> {
        Self::of(&samples.iter().map(|s| s.value).collect::<Vec<_>>())
    }
}

/// Exact median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub scans: usize,
    pub avd: Summary,
    pub id: Option<Summary>,
    pub exp: Option<Summary>,
    pub neu: Option<Summary>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| WsdfError::Validation(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WsdfError::parse("<report>", e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| WsdfError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| WsdfError::io(path, e))?;
        toml::from_str(&text).map_err(|e| WsdfError::parse(path, e.to_string()))
    }
}

/// Full evaluation: summary report plus everything needed to recompute it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub dump: PerSampleDump,
}

pub fn evaluate(
    model: &dyn FaceAutoencoder,
    records: &[ScanRecord],
    ground_truth: Option<&BTreeMap<String, FaceMesh>>,
    protocol: &EvalProtocol,
    fingerprint: impl Into<String>,
) -> Result<Evaluation> {
    let inf = Inference::run(model, records, protocol)?;
    let avd = metric_avd(records, &inf)?;
    let id = metric_id(records, &inf)?;
    let exp = metric_exp(records, &inf)?;
    let neu = match ground_truth {
        Some(gt) => metric_neu(records, &inf, gt)?,
        None => Vec::new(),
    };
    let report = MetricsReport {
        fingerprint: fingerprint.into(),
        scans: records.len(),
        avd: Summary::of_samples(&avd).expect("non-empty evaluation set"),
        id: Summary::of_samples(&id),
        exp: Summary::of_samples(&exp),
        neu: Summary::of_samples(&neu),
    };
    let dump = PerSampleDump::collect(records, &inf, ground_truth, [avd, id, exp, neu]);
    Ok(Evaluation { report, dump })
}

/// 64-bit FNV-1a, used to fingerprint configurations in reports.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolationMode {
    Joint,
    IdOnly,
    ExpOnly,
}

impl std::str::FromStr for InterpolationMode {
    type Err = WsdfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "id-only" => Ok(Self::IdOnly),
            "exp-only" => Ok(Self::ExpOnly),
            other => Err(WsdfError::Config(format!("unknown interpolation mode '{other}'"))),
        }
    }
}

/// Decodes `steps` evenly spaced points between the codes of `a` and `b`.
/// Codes not being interpolated stay at those of `a`.
pub fn interpolate(
    model: &dyn FaceAutoencoder,
    a: &FaceMesh,
    b: &FaceMesh,
    steps: usize,
    mode: InterpolationMode,
) -> Result<Vec<FaceMesh>> {
    if steps < 2 {
        return Err(WsdfError::Validation("interpolation needs at least 2 steps".into()));
    }
    let (id, exp) = model.encode(&[a, b])?;
    let lerp = |m: &Array2<f64>, t: f64| -> Array1<f64> { &m.row(0) * (1.0 - t) + &m.row(1) * t };
    let mut z_id = Array2::zeros((steps, id.ncols()));
    let mut z_exp = Array2::zeros((steps, exp.ncols()));
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        let (ti, te) = match mode {
            InterpolationMode::Joint => (t, t),
            InterpolationMode::IdOnly => (t, 0.0),
            InterpolationMode::ExpOnly => (0.0, t),
        };
        z_id.row_mut(s).assign(&lerp(&id, ti));
        z_exp.row_mut(s).assign(&lerp(&exp, te));
    }
    model.decode(&z_id, &z_exp)
}

/// One exported latent record.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub subject_id: String,
    pub expression_label: Option<String>,
    pub mu_id: Vec<f64>,
    pub mu_exp: Vec<f64>,
}

/// Writes tab-separated `subject, expression, mu_id…, mu_exp…` rows after a
/// header line. Floats use the shortest round-trip representation.
pub fn export_latents(model: &dyn FaceAutoencoder, records: &[ScanRecord], path: &Path) -> Result<Vec<LatentRecord>> {
    if records.is_empty() {
        return Err(WsdfError::Data("nothing to export".into()));
    }
    let scans: Vec<&FaceMesh> = records.iter().map(|r| &r.mesh).collect();
    let (mu_id, mu_exp) = model.encode(&scans)?;
    let rows: Vec<LatentRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| LatentRecord {
            subject_id: r.subject_id.clone(),
            expression_label: r.expression_label.clone(),
            mu_id: mu_id.row(i).to_vec(),
            mu_exp: mu_exp.row(i).to_vec(),
        })
        .collect();
    write_latents(path, &rows)?;
    Ok(rows)
}

pub fn write_latents(path: &Path, rows: &[LatentRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| WsdfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| WsdfError::io(path, e);
    let (di, de) = rows.first().map_or((0, 0), |r| (r.mu_id.len(), r.mu_exp.len()));
    let mut header = vec!["subject_id".to_owned(), "expression".to_owned()];
    header.extend((0..di).map(|k| format!("mu_id_{k}")));
    header.extend((0..de).map(|k| format!("mu_exp_{k}")));
    writeln!(w, "{}", header.join("\t")).map_err(io)?;
    for r in rows {
        let mut fields = vec![r.subject_id.clone(), r.expression_label.clone().unwrap_or_default()];
        fields.extend(r.mu_id.iter().chain(&r.mu_exp).map(|x| format!("{x:?}")));
        writeln!(w, "{}", fields.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRecord>> {
    let file = fs::File::open(path).map_err(|e| WsdfError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| WsdfError::parse(path, "missing header"))?.map_err(|e| WsdfError::io(path, e))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let di = cols.iter().filter(|c| c.starts_with("mu_id_")).count();
    let de = cols.iter().filter(|c| c.starts_with("mu_exp_")).count();
    if cols.len() != 2 + di + de {
        return Err(WsdfError::parse(path, "unexpected header columns"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| WsdfError::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(WsdfError::parse(path, format!("row {} has {} fields", n + 1, fields.len())));
        }
        let values: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| WsdfError::parse(path, format!("row {}: {e}", n + 1)))?;
        out.push(LatentRecord {
            subject_id: fields[0].to_owned(),
            expression_label: (!fields[1].is_empty()).then(|| fields[1].to_owned()),
            mu_id: values[..di].to_vec(),
            mu_exp: values[di..].to_vec(),
        });
    }
    Ok(out)
}
