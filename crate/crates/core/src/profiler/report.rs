use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scale};
use crate::nn::Ctx;
use crate::tensor::{counter, Element, Tensor};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRow {
    pub layer_id: usize,
    pub kind: String,
    /// `NxCxHxW`, several shapes joined by `;`
    pub output_shape: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub schema_version: String,
    pub scale: Option<String>,
    pub input_size: usize,
    pub rows: Vec<FlopRow>,
    pub total_params: u64,
    pub total_macs: u64,
    /// `2 * total_macs / 1e9`
    pub gflops: f64,
}

impl FlopReport {
    pub fn new(scale: Option<Scale>, input_size: usize, rows: Vec<FlopRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
        FlopReport {
            schema_version: SCHEMA_VERSION.into(),
            scale: scale.map(|s| s.to_string()),
            input_size,
            rows,
            total_params,
            total_macs,
            gflops: gflops(total_macs),
        }
    }

    /// Totals equal the column sums.
    pub fn is_consistent(&self) -> bool {
        self.total_params == self.rows.iter().map(|r| r.params).sum::<u64>()
            && self.total_macs == self.rows.iter().map(|r| r.macs).sum::<u64>()
            && self.gflops == gflops(self.total_macs)
    }
}

pub fn gflops(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e9
}

fn shape_string(shapes: &[[usize; 4]]) -> String {
    shapes
        .iter()
        .map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Analytic per-layer report for a square `input_size` image.
pub fn flop_report<T: Element>(model: &Model<T>, input_size: usize) -> Result<FlopReport> {
    let rows = model
        .stats(input_size)?
        .into_iter()
        .map(|s| FlopRow {
            layer_id: s.id,
            kind: s.label,
            output_shape: shape_string(&s.output_shapes),
            params: s.params as u64,
            macs: s.macs,
        })
        .collect();
    Ok(FlopReport::new(Some(model.cfg.scale), input_size, rows))
}

/// Run one forward pass with the MAC counter on and compare against the
/// analytic total. Returns `(analytic, instrumented)`.
pub fn verify_instrumented<T: Element>(model: &Model<T>, input_size: usize) -> Result<(u64, u64)> {
    let analytic = model.macs(input_size)?;
    let x = Tensor::<T>::zeros(vec![1, 3, input_size, input_size]);
    let (out, counted) = counter::count_macs(|| model.forward(&x, &Ctx::eval()));
    out?;
    if analytic != counted {
        return Err(Error::Report(format!(
            "analytic MACs {analytic} differ from instrumented {counted}"
        )));
    }
    Ok((analytic, counted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn to_json(report: &FlopReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Report(e.to_string()))
}

pub fn from_json(text: &str) -> Result<FlopReport> {
    let r: FlopReport = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
    if r.schema_version != SCHEMA_VERSION {
        return Err(Error::Report(format!("unsupported schema version {}", r.schema_version)));
    }
    Ok(r)
}

pub const CSV_HEADER: [&str; 5] = ["layer_id", "kind", "output_shape", "params", "macs"];

/// Rows only, header first.
pub fn to_csv(rows: &[FlopRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| Error::Report(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<FlopRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Report(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Report(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Report(e.to_string())))
        .collect()
}

pub fn emit_report(report: &FlopReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_json(report)?,
        ReportFormat::Csv => to_csv(&report.rows)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
