//! CSV ingestion: header row required, comma-separated, quoted fields allowed.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    /// Source line of each row, 1-based, counting the header as line 1.
    lines: Vec<u64>,
}

/// Cell contents treated as missing.
pub fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "." | "null")
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Table::from_reader(file).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Data(format!("line 1: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(Error::Data("line 1: header row is empty".into()));
        }
        for (k, h) in headers.iter().enumerate() {
            if headers[..k].contains(h) {
                return Err(Error::Data(format!("line 1: duplicate column '{h}'")));
            }
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::Data(format!("line {line}: {e}"))
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != headers.len() {
                if rec.len() == 1 && rec[0].trim().is_empty() {
                    continue;
                }
                return Err(Error::Data(format!(
                    "line {line}: {} fields, header has {}",
                    rec.len(),
                    headers.len()
                )));
            }
            rows.push(rec.iter().map(str::to_string).collect());
            lines.push(line);
        }
        if rows.is_empty() {
            return Err(Error::Data("no data rows".into()));
        }
        Ok(Table {
            headers,
            rows,
            lines,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn line(&self, row: usize) -> u64 {
        self.lines[row]
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!(
                "column '{name}' not found (have: {})",
                self.headers.join(", ")
            ))
        })
    }

    /// Rows with no missing cell in `columns`, and the number of rows
    /// rejected because of each column (first missing column counts).
    pub fn complete_rows(
        &self,
        columns: &[String],
    ) -> Result<(Vec<usize>, BTreeMap<String, usize>)> {
        let idx: Vec<usize> = columns
            .iter()
            .map(|c| self.column(c))
            .collect::<Result<_>>()?;
        let mut kept = Vec::new();
        let mut rejected = BTreeMap::new();
        for (r, row) in self.rows.iter().enumerate() {
            match idx.iter().position(|&k| is_missing(&row[k])) {
                None => kept.push(r),
                Some(m) => *rejected.entry(columns[m].clone()).or_insert(0) += 1,
            }
        }
        Ok((kept, rejected))
    }

    pub fn numeric(&self, name: &str, rows: &[usize]) -> Result<Vec<f64>> {
        let k = self.column(name)?;
        rows.iter()
            .map(|&r| {
                let cell = self.rows[r][k].trim();
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Data(format!(
                        "line {}: column '{name}' value '{cell}' is not a finite number",
                        self.lines[r]
                    ))),
                }
            })
            .collect()
    }

    pub fn text(&self, name: &str, rows: &[usize]) -> Result<Vec<String>> {
        let k = self.column(name)?;
        Ok(rows
            .iter()
            .map(|&r| self.rows[r][k].trim().to_string())
            .collect())
    }
}

/// Dense labels for string levels in order of first appearance.
pub fn intern(values: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut levels = Vec::new();
    let codes = values
        .iter()
        .map(|v| {
            *index.entry(v.as_str()).or_insert_with(|| {
                levels.push(v.clone());
                levels.len() - 1
            })
        })
        .collect();
    (codes, levels)
}
