//! Column-schema'd numeric sample tables with CSV import/export.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer-valued columns with at most this many distinct values are
/// inferred as categorical on import.
pub const CATEGORICAL_MAX_CARDINALITY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical { classes: usize },
}

impl ColumnKind {
    pub fn is_categorical(&self) -> bool {
        matches!(self, ColumnKind::Categorical { .. })
    }

    /// Width of the column after one-hot encoding.
    pub fn encoded_width(&self) -> usize {
        match self {
            ColumnKind::Continuous => 1,
            ColumnKind::Categorical { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Covariate,
    Treatment,
    Outcome,
    /// Carried alongside the data (potential outcomes, ITE) but never an
    /// estimator input.
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: ColumnRole) -> Self {
        Column {
            name: name.into(),
            kind,
            role,
        }
    }

    pub fn covariate(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self::new(name, kind, ColumnRole::Covariate)
    }
}

/// Row-major table of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    columns: Vec<Column>,
    data: Vec<f64>,
    rows: usize,
}

impl SampleTable {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        check_schema(&columns)?;
        Ok(SampleTable {
            columns,
            data: Vec::new(),
            rows: 0,
        })
    }

    pub fn from_rows(columns: Vec<Column>, data: Vec<f64>) -> Result<Self> {
        check_schema(&columns)?;
        let width = columns.len();
        if width == 0 || !data.len().is_multiple_of(width) {
            return Err(Error::Contract(format!(
                "{} cells do not fill rows of width {width}",
                data.len()
            )));
        }
        let table = SampleTable {
            rows: data.len() / width,
            columns,
            data,
        };
        for r in 0..table.rows {
            table.check_row(table.row(r))?;
        }
        Ok(table)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width() + c]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.width() {
            return Err(Error::Contract(format!(
                "row of length {} pushed into table of width {}",
                row.len(),
                self.width()
            )));
        }
        self.check_row(row)?;
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        for (value, col) in row.iter().zip(&self.columns) {
            if !value.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite value in column {}",
                    col.name
                )));
            }
            if let ColumnKind::Categorical { classes } = col.kind {
                if !is_category(*value, classes) {
                    return Err(Error::Contract(format!(
                        "value {value} is not a category of {} (K={classes})",
                        col.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn require_column(&self, name: &str) -> Result<usize> {
        self.column_index(name)
            .ok_or_else(|| Error::config(format!("unknown column '{name}'")))
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        self.rows().map(|row| row[c]).collect()
    }

    pub fn role_index(&self, role: ColumnRole) -> Option<usize> {
        self.columns.iter().position(|c| c.role == role)
    }

    pub fn covariate_indices(&self) -> Vec<usize> {
        (0..self.width())
            .filter(|&c| self.columns[c].role == ColumnRole::Covariate)
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> SampleTable {
        let mut data = Vec::with_capacity(rows.len() * self.width());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        SampleTable {
            columns: self.columns.clone(),
            data,
            rows: rows.len(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> SampleTable {
        let columns: Vec<Column> = cols.iter().map(|&c| self.columns[c].clone()).collect();
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for row in self.rows() {
            data.extend(cols.iter().map(|&c| row[c]));
        }
        SampleTable {
            columns,
            data,
            rows: self.rows,
        }
    }

    /// Reassigns roles by column name; unnamed columns become covariates.
    pub fn with_roles(&self, treatment: Option<&str>, outcome: Option<&str>) -> Result<SampleTable> {
        let mut columns = self.columns.clone();
        for col in &mut columns {
            col.role = ColumnRole::Covariate;
        }
        if let Some(t) = treatment {
            columns[self.require_column(t)?].role = ColumnRole::Treatment;
        }
        if let Some(y) = outcome {
            columns[self.require_column(y)?].role = ColumnRole::Outcome;
        }
        check_schema(&columns)?;
        Ok(SampleTable {
            columns,
            data: self.data.clone(),
            rows: self.rows,
        })
    }

    /// Replaces a column's values and kind in place.
    pub fn replace_column(&mut self, c: usize, kind: ColumnKind, values: &[f64]) -> Result<()> {
        if values.len() != self.rows {
            return Err(Error::Contract("replacement column length mismatch".into()));
        }
        let w = self.width();
        let old = self.columns[c].kind;
        self.columns[c].kind = kind;
        for (r, v) in values.iter().enumerate() {
            if let ColumnKind::Categorical { classes } = kind {
                if !is_category(*v, classes) {
                    self.columns[c].kind = old;
                    return Err(Error::Contract(format!("value {v} is not a category")));
                }
            }
            self.data[r * w + c] = *v;
        }
        Ok(())
    }

    pub fn set_kind(&mut self, c: usize, kind: ColumnKind) -> Result<()> {
        let values = self.column_values(c);
        self.replace_column(c, kind, &values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_io)?;
        for row in self.rows() {
            let record: Vec<String> = row
                .iter()
                .zip(&self.columns)
                .map(|(v, col)| format_cell(*v, col.kind))
                .collect();
            out.write_record(&record).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads a headered CSV, inferring column kinds; every column is a
    /// covariate until roles are assigned.
    pub fn read_csv<R: Read>(reader: R) -> Result<SampleTable> {
        let mut input = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = input
            .headers()
            .map_err(|e| csv_parse(e, 1))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::Parse {
                row: 1,
                column: 1,
                message: "missing header row".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for (i, name) in header.iter().enumerate() {
            if name.is_empty() || !seen.insert(name.clone()) {
                return Err(Error::Parse {
                    row: 1,
                    column: i + 1,
                    message: format!("empty or duplicate column name '{name}'"),
                });
            }
        }
        let width = header.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for (r, record) in input.records().enumerate() {
            let line = r + 2;
            let record = record.map_err(|e| csv_parse(e, line))?;
            if record.len() != width {
                return Err(Error::Parse {
                    row: line,
                    column: record.len().min(width) + 1,
                    message: format!("expected {width} fields, found {}", record.len()),
                });
            }
            for (c, field) in record.iter().enumerate() {
                let value: f64 = field.parse().map_err(|_| Error::Parse {
                    row: line,
                    column: c + 1,
                    message: format!("'{field}' is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(Error::Parse {
                        row: line,
                        column: c + 1,
                        message: "non-finite value".into(),
                    });
                }
                data.push(value);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Parse {
                row: 2,
                column: 1,
                message: "no data rows".into(),
            });
        }
        let columns = header
            .into_iter()
            .enumerate()
            .map(|(c, name)| {
                let kind = infer_kind(data.iter().skip(c).step_by(width).copied());
                Column::covariate(name, kind)
            })
            .collect();
        Ok(SampleTable {
            columns,
            data,
            rows,
        })
    }
}

/// Integer-valued, non-negative, cardinality ≤ 10 → categorical.
pub fn infer_kind(values: impl Iterator<Item = f64>) -> ColumnKind {
    let mut distinct = BTreeSet::new();
    for v in values {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return ColumnKind::Continuous;
        }
        distinct.insert(v as u64);
        if distinct.len() > CATEGORICAL_MAX_CARDINALITY {
            return ColumnKind::Continuous;
        }
    }
    let max = distinct.iter().next_back().copied().unwrap_or(0) as usize;
    if max + 1 > CATEGORICAL_MAX_CARDINALITY * 10 {
        return ColumnKind::Continuous;
    }
    ColumnKind::Categorical {
        classes: (max + 1).max(2),
    }
}

fn is_category(v: f64, classes: usize) -> bool {
    v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes
}

fn format_cell(v: f64, kind: ColumnKind) -> String {
    match kind {
        ColumnKind::Categorical { .. } => format!("{}", v as u64),
        ColumnKind::Continuous => format!("{v}"),
    }
}

fn check_schema(columns: &[Column]) -> Result<()> {
    let treatments = columns.iter().filter(|c| c.role == ColumnRole::Treatment).count();
    let outcomes = columns.iter().filter(|c| c.role == ColumnRole::Outcome).count();
    if treatments > 1 || outcomes > 1 {
        return Err(Error::Contract(
            "a table carries at most one treatment and one outcome column".into(),
        ));
    }
    let mut names = BTreeSet::new();
    for col in columns {
        if !names.insert(col.name.as_str()) {
            return Err(Error::Contract(format!("duplicate column '{}'", col.name)));
        }
        if let ColumnKind::Categorical { classes } = col.kind {
            if classes < 2 {
                return Err(Error::Contract(format!(
                    "categorical column '{}' needs at least 2 classes",
                    col.name
                )));
            }
        }
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn csv_parse(e: csv::Error, fallback_row: usize) -> Error {
    let row = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_row);
    Error::Parse {
        row,
        column: 1,
        message: e.to_string(),
    }
}
