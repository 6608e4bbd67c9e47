//! Experiment reports: per-row metric records, recomputable aggregates and
//! JSON/CSV export with stable field ordering.
//!
//! Reports are fully deterministic functions of the inputs and seeds; the
//! wall clock is printed by the CLI to stderr and deliberately kept out of
//! the report files so identical runs are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "bodyik-report-v1";

/// One record: per person for round-trip runs, per scene for evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub person: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mve_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck3d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmje_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmve_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpjpe_refined_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pa_mpjpe_refined_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mve_refined_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pck3d_refined: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmje_refined_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmve_refined_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ik_degenerate_joints: Option<usize>,
}

const METRIC_COLUMNS: [&str; 13] = [
    "f1",
    "mpjpe_mm",
    "pa_mpjpe_mm",
    "mve_mm",
    "pck3d",
    "nmje_mm",
    "nmve_mm",
    "mpjpe_refined_mm",
    "pa_mpjpe_refined_mm",
    "mve_refined_mm",
    "pck3d_refined",
    "nmje_refined_mm",
    "nmve_refined_mm",
];

impl ReportRow {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "f1" => self.f1,
            "mpjpe_mm" => self.mpjpe_mm,
            "pa_mpjpe_mm" => self.pa_mpjpe_mm,
            "mve_mm" => self.mve_mm,
            "pck3d" => self.pck3d,
            "nmje_mm" => self.nmje_mm,
            "nmve_mm" => self.nmve_mm,
            "mpjpe_refined_mm" => self.mpjpe_refined_mm,
            "pa_mpjpe_refined_mm" => self.pa_mpjpe_refined_mm,
            "mve_refined_mm" => self.mve_refined_mm,
            "pck3d_refined" => self.pck3d_refined,
            "nmje_refined_mm" => self.nmje_refined_mm,
            "nmve_refined_mm" => self.nmve_refined_mm,
            _ => None,
        }
    }
}

/// Mean and median of one metric across the rows where it is present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    /// Echo of the run configuration (flags, seeds, paths).
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl ExperimentReport {
    pub fn new(config: serde_json::Value, rows: Vec<ReportRow>) -> Self {
        let aggregates = compute_aggregates(&rows);
        ExperimentReport {
            schema: REPORT_SCHEMA.to_string(),
            config,
            rows,
            aggregates,
        }
    }

    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.get(metric)
    }
}

/// Aggregates from scratch; the stored ones must always equal this.
pub fn compute_aggregates(rows: &[ReportRow]) -> BTreeMap<String, Aggregate> {
    let mut out = BTreeMap::new();
    for name in METRIC_COLUMNS {
        let mut values: Vec<f64> = rows.iter().filter_map(|r| r.metric(name)).collect();
        if values.is_empty() {
            continue;
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let median = if values.len() % 2 == 1 {
            values[values.len() / 2]
        } else {
            0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2])
        };
        out.insert(
            name.to_string(),
            Aggregate {
                mean,
                median,
                count: values.len(),
            },
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidInput(format!(
                "unknown report format '{other}' (expected json|csv)"
            ))),
        }
    }
}

/// Write the report; JSON round-trips losslessly, CSV emits one line per
/// row with a fixed column set.
pub fn export_report(report: &ExperimentReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Json {
                path: path.display().to_string(),
                source: e,
            })?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(report),
    };
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("scene,person,ik_degenerate_joints");
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&row.scene.to_string());
        out.push(',');
        if let Some(p) = row.person {
            out.push_str(&p.to_string());
        }
        out.push(',');
        if let Some(d) = row.ik_degenerate_joints {
            out.push_str(&d.to_string());
        }
        for c in METRIC_COLUMNS {
            out.push(',');
            if let Some(v) = row.metric(c) {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}
