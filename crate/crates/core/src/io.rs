//! File formats.
//!
//! Matrices are CSV, one row per line, no header, every value written with 17 significant
//! digits (`{:.16e}`), so a write followed by a read reproduces each `f64` exactly.
//! Parameters are JSON objects `{"schema_version", "p", "A", "sigma_eta_sq",
//! "sigma_eps_sq"}` where `A` is either a list of rows or the path of a matrix CSV,
//! resolved relative to the JSON file. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const SCHEMA_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a headerless numeric CSV. Blank lines are skipped; every row must have the same
/// number of fields.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!("line {}: '{}' is not a number", lineno + 1, field.trim()))
            })?;
            values.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::Parse(format!(
                    "line {}: expected {c} fields, found {n}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse("matrix file is empty".into()))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix(&read_text(path)?).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, format_matrix(m).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixField {
    Rows(Vec<Vec<f64>>),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub schema_version: u32,
    pub p: usize,
    #[serde(rename = "A")]
    pub a: MatrixField,
    pub sigma_eta_sq: f64,
    pub sigma_eps_sq: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ParamsFile {
    /// `A` stored inline.
    pub fn inline(params: &ModelParams) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            p: params.dim(),
            a: MatrixField::Rows(rows_of(&params.a)),
            sigma_eta_sq: params.sigma_eta_sq,
            sigma_eps_sq: params.sigma_eps_sq,
        }
    }

    /// `A` stored as a reference to a matrix file.
    pub fn referencing(params: &ModelParams, a_path: &str) -> Self {
        Self {
            a: MatrixField::Path(a_path.to_string()),
            ..Self::inline(params)
        }
    }

    /// Builds the parameters; a path-valued `A` is resolved against `base`.
    pub fn resolve(&self, base: &Path) -> Result<ModelParams> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let a = match &self.a {
            MatrixField::Rows(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Parse("inline A is not square".into()));
                }
                DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied())
            }
            MatrixField::Path(p) => read_matrix(&base.join(p))?,
        };
        if a.shape() != (self.p, self.p) {
            return Err(Error::Dimension(format!(
                "A is {:?} but p = {}",
                a.shape(),
                self.p
            )));
        }
        ModelParams::new(a, self.sigma_eta_sq, self.sigma_eps_sq)
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Numerical(format!("cannot serialize: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value)?.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    let file: ParamsFile = read_json(path)?;
    file.resolve(path.parent().unwrap_or(Path::new(".")))
}

pub fn write_params(path: &Path, params: &ModelParams) -> Result<()> {
    write_json(path, &ParamsFile::inline(params))
}
