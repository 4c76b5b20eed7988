//! Report emission.
//!
//! JSON: `{"schema_version": 1, "results": [BenchResult, ...]}` with nested
//! configs, per-variant timing stats and full cost reports.
//!
//! CSV: one row per head variant with columns `schema_version, preset,
//! resolution, Qn, upsample_location, stride, median_ms, throughput,
//! head_gflops, peak_bytes, max_deviation, head, reps, min_ms, iqr_ms,
//! backbone_gflops_modeled`. `max_deviation` is empty when no comparable
//! variant ran. Timing columns are the only non-reproducible fields.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BenchResult;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub results: Vec<BenchResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub preset: String,
    pub resolution: String,
    #[serde(rename = "Qn")]
    pub queries: usize,
    pub upsample_location: String,
    pub stride: usize,
    pub median_ms: f64,
    pub throughput: f64,
    pub head_gflops: f64,
    pub peak_bytes: u64,
    pub max_deviation: Option<f64>,
    pub head: String,
    pub reps: usize,
    pub min_ms: f64,
    pub iqr_ms: f64,
    pub backbone_gflops_modeled: f64,
}

impl ReportRow {
    pub fn rows(results: &[BenchResult]) -> Vec<ReportRow> {
        results
            .iter()
            .flat_map(|r| {
                r.variants.iter().map(move |v| ReportRow {
                    schema_version: SCHEMA_VERSION,
                    preset: r.config.preset.name().to_owned(),
                    resolution: format!("{}x{}", r.config.image_h, r.config.image_w),
                    queries: r.config.queries,
                    upsample_location: v.upsample_location.to_string(),
                    stride: r.config.output_stride,
                    median_ms: v.timing.median_ms,
                    throughput: v.throughput,
                    head_gflops: v.head_gflops,
                    peak_bytes: v.peak_bytes,
                    max_deviation: v.max_deviation,
                    head: v.head.to_string(),
                    reps: v.timing.repetitions,
                    min_ms: v.timing.min_ms,
                    iqr_ms: v.timing.iqr_ms,
                    backbone_gflops_modeled: r.backbone_gflops_modeled,
                })
            })
            .collect()
    }
}

/// Renders results in the requested format.
pub fn render_report(results: &[BenchResult], format: ReportFormat) -> Result<String> {
    if results.is_empty() {
        return Err(Error::config("refusing to emit an empty report"));
    }
    match format {
        ReportFormat::Json => {
            let file = ReportFile { schema_version: SCHEMA_VERSION, results: results.to_vec() };
            let mut s = serde_json::to_string_pretty(&file)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in ReportRow::rows(results) {
                w.serialize(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

/// Writes the rendered report to `path`.
pub fn emit_report(results: &[BenchResult], format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(results, format)?)?;
    Ok(())
}
