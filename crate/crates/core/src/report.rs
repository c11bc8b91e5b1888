//! Recall grid output.
//!
//! CSV layout, one row per k:
//!
//! ```text
//! # xmrbench 0.1.0
//! # config {"...": ...}
//! # meta {"n_queries": ..., ...}
//! k,p_0.00,p_0.25,p_1.00,p_4.00,p_9.00,p_25.00,p_49.00,p_81.00,random
//! 5,12.34,...
//! ```
//!
//! Leading `#` lines carry provenance and are skipped by [`parse_csv`]. All
//! numbers are printed with two decimals, so output is byte-stable for a
//! given grid. JSON output holds the same information in one object.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bench::{GridMeta, RecallGrid};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot infer report format from {0:?} (use .csv or .json)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self, ReportError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv") => Ok(ReportFormat::Csv),
            Some("json") => Ok(ReportFormat::Json),
            _ => Err(ReportError::UnknownFormat(path.display().to_string())),
        }
    }
}

/// Tool identity and the exact configuration that produced a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config: Value,
}

impl Provenance {
    pub fn new(config: Value) -> Self {
        Self {
            tool: crate::TOOL_NAME.to_owned(),
            version: crate::VERSION.to_owned(),
            config,
        }
    }
}

pub fn ratio_label(ratio: f64) -> String {
    format!("p_{ratio:.2}")
}

pub fn csv_header(ratios: &[f64]) -> String {
    let mut h = String::from("k");
    for &r in ratios {
        write!(h, ",{}", ratio_label(r)).expect("string write");
    }
    h.push_str(",random");
    h
}

pub fn write_csv<W: Write>(grid: &RecallGrid, provenance: &Provenance, mut out: W) -> Result<(), ReportError> {
    writeln!(out, "# {} {}", provenance.tool, provenance.version)?;
    writeln!(out, "# config {}", serde_json::to_string(&provenance.config)?)?;
    writeln!(out, "# meta {}", serde_json::to_string(&grid.meta)?)?;
    writeln!(out, "{}", csv_header(&grid.ratios))?;
    for (row, k) in grid.k_values.iter().enumerate() {
        let mut line = k.to_string();
        for cell in &grid.cells[row] {
            write!(line, ",{cell:.2}").expect("string write");
        }
        write!(line, ",{:.2}", grid.random[row]).expect("string write");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonReport {
    tool: String,
    version: String,
    config: Value,
    grid: RecallGrid,
}

pub fn write_json<W: Write>(grid: &RecallGrid, provenance: &Provenance, mut out: W) -> Result<(), ReportError> {
    let doc = JsonReport {
        tool: provenance.tool.clone(),
        version: provenance.version.clone(),
        config: provenance.config.clone(),
        grid: grid.clone(),
    };
    serde_json::to_writer_pretty(&mut out, &doc)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn emit_report(
    grid: &RecallGrid,
    provenance: &Provenance,
    format: ReportFormat,
    path: &Path,
) -> Result<(), ReportError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Csv => write_csv(grid, provenance, file),
        ReportFormat::Json => write_json(grid, provenance, file),
    }
}

/// What a CSV report holds besides the provenance comments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub k_values: Vec<usize>,
    pub ratios: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
    pub random: Vec<f64>,
    pub comments: Vec<String>,
    pub meta: Option<GridMeta>,
}

impl ParsedCsv {
    /// Rebuild a grid; needs the `# meta` comment.
    pub fn into_grid(self) -> Option<RecallGrid> {
        Some(RecallGrid {
            k_values: self.k_values,
            ratios: self.ratios,
            cells: self.cells,
            random: self.random,
            meta: self.meta?,
        })
    }
}

pub fn parse_csv<R: BufRead>(reader: R) -> Result<ParsedCsv, ReportError> {
    let mut comments = Vec::new();
    let mut meta = None;
    let mut header: Option<Vec<f64>> = None;
    let mut k_values = Vec::new();
    let mut cells = Vec::new();
    let mut random = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let err = |message: String| ReportError::Parse { line: lineno, message };
        if let Some(c) = line.strip_prefix('#') {
            let c = c.trim_start();
            if let Some(m) = c.strip_prefix("meta ") {
                meta = Some(serde_json::from_str(m).map_err(|e| err(format!("meta: {e}")))?);
            }
            comments.push(c.to_owned());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let Some(ratios) = &header else {
            if fields.len() < 3 || fields[0] != "k" || fields[fields.len() - 1] != "random" {
                return Err(err(format!("unexpected header {line:?}")));
            }
            let ratios = fields[1..fields.len() - 1]
                .iter()
                .map(|f| {
                    f.strip_prefix("p_")
                        .and_then(|v| v.parse::<f64>().ok())
                        .ok_or_else(|| err(format!("bad ratio column {f:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            header = Some(ratios);
            continue;
        };
        if fields.len() != ratios.len() + 2 {
            return Err(err(format!(
                "expected {} fields, got {}",
                ratios.len() + 2,
                fields.len()
            )));
        }
        k_values.push(fields[0].parse().map_err(|_| err(format!("bad k {:?}", fields[0])))?);
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        random.push(values[values.len() - 1]);
        cells.push(values[..values.len() - 1].to_vec());
    }
    let ratios = header.ok_or(ReportError::Parse {
        line: 0,
        message: "no header row".into(),
    })?;
    Ok(ParsedCsv {
        k_values,
        ratios,
        cells,
        random,
        comments,
        meta,
    })
}

pub fn parse_json(text: &str) -> Result<(RecallGrid, Provenance), ReportError> {
    let doc: JsonReport = serde_json::from_str(text)?;
    Ok((
        doc.grid,
        Provenance {
            tool: doc.tool,
            version: doc.version,
            config: doc.config,
        },
    ))
}
