use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::store::{write_csv, ExportRow, EXPORT_COLUMNS};

use super::AuditError;

/// An export file held as raw text cells, so malformed values stay visible
/// to the type checks instead of failing the parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ExportTable {
    pub fn read<R: Read>(input: R) -> Result<Self, AuditError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(input);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut row: Vec<String> = rec.iter().map(str::to_string).collect();
            row.resize(headers.len(), String::new());
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        Self::read(File::open(path)?)
    }

    pub fn from_rows(rows: &[ExportRow]) -> Self {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf).expect("writing to memory cannot fail");
        Self::read(buf.as_slice()).expect("freshly written export parses")
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize, AuditError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| self.mismatch())
    }

    pub fn cells<'a>(&'a self, name: &str) -> Result<impl Iterator<Item = &'a str> + 'a, AuditError> {
        let idx = self.column(name)?;
        Ok(self.rows.iter().map(move |r| r[idx].as_str()))
    }

    pub fn has_export_schema(&self) -> bool {
        self.headers.iter().map(String::as_str).eq(EXPORT_COLUMNS)
    }

    pub fn require_export_schema(&self) -> Result<(), AuditError> {
        if self.has_export_schema() {
            Ok(())
        } else {
            Err(self.mismatch())
        }
    }

    fn mismatch(&self) -> AuditError {
        AuditError::SchemaMismatch {
            expected: EXPORT_COLUMNS.join(","),
            found: self.headers.join(","),
        }
    }
}
