//! Report files written by `eval` and `perm-test`, their JSON schemas and
//! plain-text summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use odgen_core::io::{atomic_write, write_json};
use odgen_core::metrics::MetricsReport;
use odgen_core::robustness::RobustnessRow;
use odgen_model::Result;
use serde::{Deserialize, Serialize};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const METRICS_SCHEMA_ID: &str = "odgen/metrics-report/1";
pub const PERM_SCHEMA_ID: &str = "odgen/perm-table/1";

pub const METRICS_SCHEMA: &str = include_str!("../schemas/metrics_report.schema.json");
pub const PERM_SCHEMA: &str = include_str!("../schemas/perm_table.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityMetrics {
    pub city_id: String,
    pub n: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReportFile {
    pub schema: String,
    pub format_version: u32,
    /// Model digest, baseline label or prediction file name.
    pub generator: String,
    /// Evaluated split, absent for a single prediction file.
    pub split: Option<String>,
    pub seed: u64,
    pub bins: usize,
    pub cities: Vec<CityMetrics>,
    pub mean: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTableFile {
    pub schema: String,
    pub format_version: u32,
    pub generator: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub bins: usize,
    pub rows: Vec<RobustnessRow>,
    pub relative_increase: f64,
    pub monotone: bool,
}

/// `report.json` -> `report.txt`.
pub fn summary_path(report: &Path) -> PathBuf {
    report.with_extension("txt")
}

pub fn metrics_summary(r: &MetricsReportFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "generator: {}", r.generator);
    if let Some(split) = &r.split {
        let _ = writeln!(s, "split: {split} ({} cities)", r.cities.len());
    }
    let _ = writeln!(s, "{:<14} {:>4} {:>8} {:>12} {:>8} {:>8} {:>8} {:>8}", "city", "n", "cpc", "rmse", "nrmse", "jsd_in", "jsd_out", "jsd_od");
    let row = |s: &mut String, id: &str, n: String, m: &MetricsReport| {
        let _ = writeln!(
            s,
            "{:<14} {:>4} {:>8.4} {:>12.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            id, n, m.cpc, m.rmse, m.nrmse, m.jsd_inflow, m.jsd_outflow, m.jsd_odflow
        );
    };
    for c in &r.cities {
        row(&mut s, &c.city_id, c.n.to_string(), &c.metrics);
    }
    if r.cities.len() > 1 {
        row(&mut s, "mean", String::new(), &r.mean);
    }
    s
}

pub fn perm_summary(t: &PermTableFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "generator: {}", t.generator);
    let _ = writeln!(s, "split: {}  seeds: {:?}", t.split, t.seeds);
    let _ = writeln!(s, "{:>9}  {:>10}", "intensity", "jsd_odflow");
    for r in &t.rows {
        let _ = writeln!(s, "{:>9.2}  {:>10.4}", r.intensity, r.mean_jsd_odflow);
    }
    let _ = writeln!(s, "relative increase: {:.4}  monotone: {}", t.relative_increase, t.monotone);
    s
}

/// Writes the JSON report and its text summary next to it.
pub fn write_report<T: Serialize>(path: &Path, value: &T, summary: &str) -> Result<()> {
    write_json(path, value)?;
    atomic_write(&summary_path(path), summary.as_bytes())?;
    Ok(())
}
