//! Numeric CSV tables with a header row.

use std::path::Path;

use crate::error::{EsmError, Result};
use crate::matrix::Matrix;
use crate::sim::csv_error;

/// Parsed file: header names and raw cells, rows numbered from 1 after the
/// header.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            EsmError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(input);
        let headers: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(EsmError::Format("CSV file has no header row".into()));
        }
        let mut rows = Vec::new();
        for (k, record) in reader.records().enumerate() {
            let row = k + 1;
            let record = record.map_err(|e| EsmError::data(row, format!("unreadable record: {e}")))?;
            if record.len() != headers.len() {
                return Err(EsmError::data(
                    row,
                    format!("has {} fields, header has {}", record.len(), headers.len()),
                ));
            }
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// One column parsed as numbers.
    pub fn numeric_column(&self, col: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(k, row)| parse_cell(&row[col], k + 1, &self.headers[col]))
            .collect()
    }

    /// The listed columns as an `rows × columns.len()` matrix.
    pub fn numeric_matrix(&self, columns: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.rows.len() * columns.len());
        for (k, row) in self.rows.iter().enumerate() {
            for &c in columns {
                data.push(parse_cell(&row[c], k + 1, &self.headers[c])?);
            }
        }
        Matrix::new(self.rows.len(), columns.len(), data)
    }
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = cell
        .parse()
        .map_err(|_| EsmError::data(row, format!("column `{column}`: {cell:?} is not a number")))?;
    if !value.is_finite() {
        return Err(EsmError::data(row, format!("column `{column}`: {cell:?} is not finite")));
    }
    Ok(value)
}
