//! Comparison tables over finished runs.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Metrics;
use crate::error::{invalid, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    #[serde(with = "crate::serde_float")]
    pub epsilon: f64,
    #[serde(with = "crate::serde_float")]
    pub epsilon_spent: f64,
    pub seed: u64,
    pub fid: f64,
    pub is_proxy: f64,
    pub precision: f64,
    pub recall: f64,
    pub acc_testfix: Option<f64>,
    pub acc_senv: Option<f64>,
    pub acc_synv: Option<f64>,
    pub acc_noisy_senv: Option<f64>,
    pub run_id: String,
}

impl ReportRow {
    pub fn from_metrics(m: &Metrics) -> Self {
        let acc = |p: &str| m.utility.get(p).map(|r| r.test_accuracy);
        Self {
            method: m.method.clone(),
            epsilon: m.epsilon_target.0,
            epsilon_spent: m.epsilon_spent,
            seed: m.seed,
            fid: m.fid,
            is_proxy: m.is_proxy,
            precision: m.precision,
            recall: m.recall,
            acc_testfix: acc("testfix"),
            acc_senv: acc("senv"),
            acc_synv: acc("synv"),
            acc_noisy_senv: acc("noisy_senv"),
            run_id: m.run_id.clone(),
        }
    }
}

fn order(a: &ReportRow, b: &ReportRow) -> Ordering {
    a.method
        .cmp(&b.method)
        .then(a.epsilon.total_cmp(&b.epsilon))
        .then(a.seed.cmp(&b.seed))
        .then(a.run_id.cmp(&b.run_id))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn eps_cell(v: f64) -> String {
    if v.is_infinite() {
        "∞".into()
    } else {
        format!("{v}")
    }
}

/// Writes `report.csv` and `report.md` into `out_dir`, rows sorted by method then ε.
pub fn emit_report(metrics: &[Metrics], out_dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    if metrics.is_empty() {
        return invalid("report needs at least one run");
    }
    let mut rows: Vec<ReportRow> = metrics.iter().map(ReportRow::from_metrics).collect();
    rows.sort_by(order);
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let csv_path = out.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut md = String::from(
        "| method | ε | ε spent | seed | FID | IS proxy | precision | recall | acc testfix | acc senv | acc synv | acc noisy senv |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} | {} | {} |\n",
            r.method,
            eps_cell(r.epsilon),
            eps_cell(r.epsilon_spent),
            r.seed,
            r.fid,
            r.is_proxy,
            r.precision,
            r.recall,
            cell(r.acc_testfix),
            cell(r.acc_senv),
            cell(r.acc_synv),
            cell(r.acc_noisy_senv),
        ));
    }
    md.push_str("\nSenV selects on test labels and is not differentially private.\n");
    let md_path = out.join(REPORT_MD);
    std::fs::write(&md_path, md)?;
    Ok((csv_path, md_path))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<ReportRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}
