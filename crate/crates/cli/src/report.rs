//! Versioned on-disk form of analysis reports and sweep tables.

use aliascope::aliasing::{Category, Fractions};
use aliascope::instrumentation::AnalysisReport;
use aliascope::SweepTable;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::output::Csv;
use crate::CliError;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: u32,
    #[serde(flatten)]
    pub report: AnalysisReport,
}

impl ReportFile {
    pub fn new(report: AnalysisReport) -> Self {
        Self {
            version: REPORT_VERSION,
            report,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Parses a report, refusing versions other than the one this build
    /// writes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |e: serde_json::Error| CliError::Runtime(format!("malformed report: {e}"));
        let value: Value = serde_json::from_slice(bytes).map_err(bad)?;
        match value.get("version").and_then(Value::as_u64) {
            Some(v) if v == REPORT_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::Runtime(format!(
                    "unsupported report version {v} (this build reads version {REPORT_VERSION})"
                )))
            }
            None => return Err(CliError::Runtime("report has no version field".into())),
        }
        serde_json::from_value(value).map_err(bad)
    }
}

fn fraction_fields(f: &Fractions) -> Vec<String> {
    Category::ALL.iter().map(|&c| f.get(c).to_string()).collect()
}

fn category_header() -> Vec<String> {
    Category::ALL.iter().map(|c| c.as_str().replace('-', "_")).collect()
}

/// One row per point plus an `outer` row (equal weight over points).
pub fn points_csv(report: &AnalysisReport) -> Vec<u8> {
    let mut csv = Csv::default();
    let mut header = vec!["point".to_string(), "r".into()];
    header.extend(category_header());
    header.extend(category_header().into_iter().map(|c| format!("count_{c}")));
    csv.row(header);
    for p in &report.points {
        let mut row = vec![p.name.clone(), p.r.to_string()];
        row.extend(fraction_fields(&p.fractions));
        row.extend(Category::ALL.iter().map(|&c| p.counts.get(c).to_string()));
        csv.row(row);
    }
    if let Some(outer) = &report.outer_equal_weight {
        let mut row = vec!["outer".to_string(), String::new()];
        row.extend(fraction_fields(outer));
        row.extend(std::iter::repeat_n(String::new(), Category::ALL.len()));
        csv.row(row);
    }
    csv.into_bytes()
}

/// Long format: one row per sample and point, plus a `pooled` row per
/// sample.
pub fn samples_csv(report: &AnalysisReport) -> Vec<u8> {
    let mut csv = Csv::default();
    let mut header = vec![
        "index".to_string(),
        "label".into(),
        "predicted".into(),
        "correct".into(),
        "point".into(),
    ];
    header.extend(category_header());
    csv.row(header);
    for s in &report.samples {
        let lead = [
            s.index.to_string(),
            s.label.to_string(),
            s.predicted.to_string(),
            s.correct.to_string(),
        ];
        let named = report
            .points
            .iter()
            .map(|p| p.name.as_str())
            .zip(&s.per_point_fractions)
            .chain(s.pooled_fractions.as_ref().map(|f| ("pooled", f)));
        for (name, f) in named {
            let mut row = lead.to_vec();
            row.push(name.to_string());
            row.extend(fraction_fields(f));
            csv.row(row);
        }
    }
    csv.into_bytes()
}

pub fn sweep_csv(table: &SweepTable) -> Vec<u8> {
    let mut csv = Csv::default();
    let mut header = vec![
        "epsilon".to_string(),
        "top1".into(),
        "top5".into(),
        "max_perturbation".into(),
    ];
    let labels: Vec<String> = table
        .points
        .iter()
        .cloned()
        .chain((!table.points.is_empty()).then(|| "pooled".to_string()))
        .collect();
    for p in &labels {
        for stat in ["median", "p1", "p99"] {
            header.push(format!("aliased_{p}_{stat}"));
        }
    }
    csv.row(header);
    for row in &table.rows {
        let mut fields = vec![
            row.epsilon.to_string(),
            row.top1.to_string(),
            row.top5.to_string(),
            row.max_perturbation.to_string(),
        ];
        for s in row.per_point.iter().chain(row.pooled.as_ref()) {
            fields.extend([s.median.to_string(), s.p1.to_string(), s.p99.to_string()]);
        }
        csv.row(fields);
    }
    csv.into_bytes()
}
