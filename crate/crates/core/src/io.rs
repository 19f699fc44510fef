//! File formats: logit tables, CSV results, JSON artifacts.
//!
//! Floats are written with Rust's `Display`, which emits the shortest
//! decimal string that parses back to the same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::adjustment::LogitMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Renders a logit table: `K=<k>` then `label,logit_1,...,logit_K` per row.
pub fn format_logits(logits: &LogitMatrix, labels: &[usize]) -> Result<String> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(logits.rows(), labels.len()));
    }
    let mut s = format!("K={}\n", logits.classes());
    for (i, &y) in labels.iter().enumerate() {
        let _ = write!(s, "{y}");
        for v in logits.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_logits(path: &Path, logits: &LogitMatrix, labels: &[usize]) -> Result<()> {
    fs::write(path, format_logits(logits, labels)?)?;
    Ok(())
}

/// Parses a logit table. Line numbers in errors are 1-based.
pub fn parse_logits(text: &str) -> Result<(LogitMatrix, Vec<usize>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing `K=<int>` header".into(),
    })?;
    let k: usize = head
        .trim()
        .strip_prefix("K=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("expected `K=<int>`, found `{}`", head.trim()),
        })?;
    if k < 2 {
        return Err(Error::TooFewClasses { min: 2, found: k });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if fields.len() != k + 1 {
            return Err(Error::WidthMismatch {
                line: line_no,
                expected: k,
                found: fields.len().saturating_sub(1),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad label `{}`", fields[0]),
        })?;
        if label >= k {
            return Err(Error::LabelRange {
                line: line_no,
                label,
                classes: k,
            });
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad logit `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteInput { line: line_no });
            }
            data.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = Matrix::from_vec(labels.len(), k, data)?;
    Ok((LogitMatrix::new(m)?, labels))
}

pub fn import_logits(path: &Path) -> Result<(LogitMatrix, Vec<usize>)> {
    parse_logits(&fs::read_to_string(path)?)
}

/// A table written as CSV with a one-line header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
