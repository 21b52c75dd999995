//! Result rows and their CSV / JSON emission.
//!
//! The first eight CSV columns follow the fixed order
//! `method,f_hw,distortion,acc,tpr,tau,payload_rate,log2_users`; `log_auc`,
//! `wall_clock_s` and any additional per-target TPR columns are appended
//! after them. The JSON mirror carries identical field names plus the full
//! per-target list.

use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use latentmark::ReportRow;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FprPoint {
    pub fpr: f64,
    pub tau: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(flatten)]
    pub row: ReportRow,
    pub log_auc: f64,
    /// Mean wall-clock seconds per extraction (excluded from determinism
    /// guarantees; every other column is reproducible from the config).
    pub wall_clock_s: f64,
    /// TPR and threshold for every configured FPR target; the first target
    /// also fills the `tpr`/`tau` columns.
    pub fpr_points: Vec<FprPoint>,
}

pub fn csv_header(fpr_targets: &[f64]) -> String {
    let mut header = format!("{},log_auc,wall_clock_s", ReportRow::CSV_HEADER);
    for fpr in fpr_targets.iter().skip(1) {
        header.push_str(&format!(",tpr@{fpr:e}"));
    }
    header
}

pub fn to_csv_line(row: &ResultRow) -> String {
    let mut line = format!(
        "{},{:.6},{:.6}",
        row.row.to_csv(),
        row.log_auc,
        row.wall_clock_s
    );
    for point in row.fpr_points.iter().skip(1) {
        line.push_str(&format!(",{:.6}", point.tpr));
    }
    line
}

pub fn write_csv(path: &Path, rows: &[ResultRow], fpr_targets: &[f64]) -> Result<()> {
    let mut out = csv_header(fpr_targets);
    out.push('\n');
    for row in rows {
        out.push_str(&to_csv_line(row));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_json(path: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}
