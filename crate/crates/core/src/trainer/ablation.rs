//! Cumulative ablation ladder: baseline, then the bank, the Jacobian loss
//! and the identity compactness loss switched on one after another.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, AblationFlags, StepLog, TrainConfig};
use crate::error::{Result, WsdfError};
use crate::evaluation::{MetricsReport, Summary};

pub const ABLATION_LABELS: [&str; 4] = ["baseline", "+ neu. bank", "+ jac. loss", "+ mi. loss"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: AblationFlags,
    pub report: MetricsReport,
    pub last_step: Option<StepLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn ladder_flags() -> [AblationFlags; 4] {
    let off = AblationFlags { enable_neutral_bank: false, enable_jac: false, enable_mi: false };
    let bank = AblationFlags { enable_neutral_bank: true, ..off };
    let jac = AblationFlags { enable_jac: true, ..bank };
    let mi = AblationFlags { enable_mi: true, ..jac };
    [off, bank, jac, mi]
}

/// Trains the four configurations with the base config's seeds, writing
/// each run under `out_dir/<index>` when given.
pub fn ablation_suite(base: &TrainConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (k, (label, flags)) in ABLATION_LABELS.iter().zip(ladder_flags()).enumerate() {
        let cfg = TrainConfig { ablation: flags, ..base.clone() };
        let dir = out_dir.map(|d| d.join(format!("{k}")));
        log::info!("ablation row '{label}'");
        let outcome = train(&cfg, dir.as_deref())?;
        let report = evaluate(&outcome.trained, &outcome.data)?.report;
        rows.push(AblationRow { label: label.to_string(), flags, report, last_step: outcome.log.last().copied() });
    }
    let report = AblationReport { rows };
    if let Some(d) = out_dir {
        let path = d.join("ablation.toml");
        fs::write(&path, report.to_toml()?).map_err(|e| WsdfError::io(&path, e))?;
        let path = d.join("ablation.txt");
        fs::write(&path, report.to_table()).map_err(|e| WsdfError::io(&path, e))?;
    }
    Ok(report)
}

impl AblationReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| WsdfError::Validation(e.to_string()))
    }

    /// Plain-text table with mean and median per metric; `-` marks a metric
    /// the data cannot support.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "design", "avd.mean", "avd.med", "id.mean", "id.med", "exp.mean", "exp.med", "neu.mean", "neu.med"
        );
        let cell = |s: Option<Summary>| match s {
            Some(s) => (format!("{:.4}", s.mean), format!("{:.4}", s.median)),
            None => ("-".to_owned(), "-".to_owned()),
        };
        for row in &self.rows {
            let r = &row.report;
            let cells = [cell(Some(r.avd)), cell(r.id), cell(r.exp), cell(r.neu)];
            let _ = write!(out, "{:<14}", row.label);
            for (a, b) in cells {
                let _ = write!(out, " {a:>10} {b:>10}");
            }
            out.push('\n');
        }
        out
    }
}
