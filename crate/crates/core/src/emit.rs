//! Versioned CSV and JSON output.
//!
//! Every file starts with a format tag and version: CSV files carry a
//! `# <kind> v<version>` comment line before the header, JSON files wrap
//! the records as `{"format", "version", "columns", "records"}`. Reals are
//! written in 6-decimal fixed point in both formats, so a table read back
//! from either file compares equal to the one that was written.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::config::OutputFormat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
    #[error("cannot parse table: {0}")]
    Parse(String),
    #[error("row has {got} cells, table has {expected} columns")]
    RowWidth { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, EmitError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Int,
    Real,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
    /// Written as an empty CSV field and JSON `null`.
    Missing,
}

impl Cell {
    /// Real rounded to the 6-decimal grid it is written on.
    pub fn real(v: f64) -> Cell {
        Cell::Real(round6(v))
    }

    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) if v.is_finite() => format!("{v:.6}"),
            Cell::Real(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Real(v) => Number::from_f64(round6(*v))
                .map(Value::Number)
                .unwrap_or_else(|| Value::String(v.to_string())),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Missing => Value::Null,
        }
    }

    fn parse(kind: CellKind, text: &str) -> Result<Cell> {
        if text.is_empty() && kind != CellKind::Text {
            return Ok(Cell::Missing);
        }
        let bad = |_| EmitError::Parse(format!("{text:?} is not a valid {kind:?}"));
        Ok(match kind {
            CellKind::Int => Cell::Int(text.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
            CellKind::Real => Cell::Real(text.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?),
            CellKind::Text => Cell::Text(text.to_string()),
        })
    }

    fn from_json(kind: CellKind, v: &Value) -> Result<Cell> {
        match (kind, v) {
            (_, Value::Null) => Ok(Cell::Missing),
            (CellKind::Int, Value::Number(n)) => n
                .as_i64()
                .map(Cell::Int)
                .ok_or_else(|| EmitError::Parse(format!("{n} is not an integer"))),
            (CellKind::Real, Value::Number(n)) => Ok(Cell::Real(n.as_f64().unwrap_or(f64::NAN))),
            (CellKind::Real, Value::String(s)) => Cell::parse(kind, s),
            (CellKind::Text, Value::String(s)) => Ok(Cell::Text(s.clone())),
            (k, other) => Err(EmitError::Parse(format!("{other} is not a valid {k:?}"))),
        }
    }
}

fn round6(v: f64) -> f64 {
    if v.is_finite() {
        format!("{v:.6}").parse().expect("formatted float parses")
    } else {
        v
    }
}

/// A typed table with a format tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub kind: String,
    pub columns: Vec<(String, CellKind)>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(kind: &str, columns: &[(&str, CellKind)]) -> Self {
        Self {
            kind: kind.to_string(),
            columns: columns.iter().map(|(n, k)| (n.to_string(), *k)).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(EmitError::RowWidth {
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        self.rows.push(
            row.into_iter()
                .map(|c| match c {
                    Cell::Real(v) => Cell::real(v),
                    other => other,
                })
                .collect(),
        );
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    fn header_line(&self) -> String {
        format!("# {} v{}\n", self.kind, FORMAT_VERSION)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|(n, _)| n.as_str()))
            .expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        self.header_line() + &body
    }

    pub fn to_json(&self) -> String {
        let records: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let mut m = Map::new();
                for ((name, _), cell) in self.columns.iter().zip(row) {
                    m.insert(name.clone(), cell.to_json());
                }
                Value::Object(m)
            })
            .collect();
        let mut top = Map::new();
        top.insert("format".into(), Value::String(self.kind.clone()));
        top.insert("version".into(), Value::from(FORMAT_VERSION));
        top.insert(
            "columns".into(),
            Value::Array(self.columns.iter().map(|(n, _)| Value::String(n.clone())).collect()),
        );
        top.insert("records".into(), Value::Array(records));
        // serde_json's default map keeps keys sorted, so output is stable.
        serde_json::to_string_pretty(&Value::Object(top)).expect("json serializes") + "\n"
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    /// Parse CSV written by [`Table::to_csv`], using this table's columns as schema.
    pub fn parse_csv(schema: &Table, text: &str) -> Result<Table> {
        let mut lines = text.splitn(2, '\n');
        let tag = lines.next().unwrap_or_default();
        if tag.trim() != schema.header_line().trim() {
            return Err(EmitError::Parse(format!("unexpected format line {tag:?}")));
        }
        let mut r = csv::ReaderBuilder::new().from_reader(lines.next().unwrap_or_default().as_bytes());
        let headers = r.headers().map_err(|e| EmitError::Parse(e.to_string()))?.clone();
        if headers.iter().ne(schema.columns.iter().map(|(n, _)| n.as_str())) {
            return Err(EmitError::Parse("column names differ from schema".into()));
        }
        let mut out = Table {
            kind: schema.kind.clone(),
            columns: schema.columns.clone(),
            rows: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| EmitError::Parse(e.to_string()))?;
            let row = rec
                .iter()
                .zip(&schema.columns)
                .map(|(t, (_, k))| Cell::parse(*k, t))
                .collect::<Result<Vec<_>>>()?;
            out.push(row)?;
        }
        Ok(out)
    }

    /// Parse JSON written by [`Table::to_json`], using this table's columns as schema.
    pub fn parse_json(schema: &Table, text: &str) -> Result<Table> {
        let v: Value = serde_json::from_str(text).map_err(|e| EmitError::Parse(e.to_string()))?;
        if v["format"] != Value::String(schema.kind.clone()) || v["version"] != Value::from(FORMAT_VERSION) {
            return Err(EmitError::Parse("format tag or version differs".into()));
        }
        let mut out = Table {
            kind: schema.kind.clone(),
            columns: schema.columns.clone(),
            rows: Vec::new(),
        };
        let records = v["records"]
            .as_array()
            .ok_or_else(|| EmitError::Parse("records is not an array".into()))?;
        for rec in records {
            let row = schema
                .columns
                .iter()
                .map(|(n, k)| Cell::from_json(*k, rec.get(n).unwrap_or(&Value::Null)))
                .collect::<Result<Vec<_>>>()?;
            out.push(row)?;
        }
        Ok(out)
    }
}

/// Write `table` to `path`, creating parent directories.
pub fn write_table(table: &Table, format: OutputFormat, path: &Path) -> Result<()> {
    let err = |e: std::io::Error| EmitError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    let mut file = fs::File::create(path).map_err(err)?;
    file.write_all(table.render(format).as_bytes()).map_err(err)?;
    Ok(())
}
