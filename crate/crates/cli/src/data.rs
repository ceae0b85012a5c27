//! CSV ingestion and output tables.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rfpsis::nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub predictors: Vec<String>,
}

/// Reads a headed, comma-separated numeric table and splits off the response column.
/// Without a response `y` is empty and every column is a predictor.
pub fn read_dataset(path: &Path, response: Option<&str>) -> CliResult<Dataset> {
    let file = File::open(path).map_err(CliError::io(path))?;
    parse_dataset(file, response)
}

pub fn parse_dataset(input: impl std::io::Read, response: Option<&str>) -> CliResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Parse(format!("header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let yi = match response {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Parse(format!("response column '{name}' not found in header")))?,
        ),
        None => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| CliError::Parse(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(CliError::Parse(format!("row {row}: expected {} cells, found {}", header.len(), rec.len())));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Parse(format!("row {row}, column '{}': non-numeric cell '{cell}'", header[c]))),
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(CliError::Parse("no data rows".into()));
    }
    let n = rows.len();
    let cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != yi).collect();
    if cols.is_empty() {
        return Err(CliError::Parse("need at least one predictor column".into()));
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| rows[i][cols[j]]);
    let y = match yi {
        Some(c) => DVector::from_fn(n, |i, _| rows[i][c]),
        None => DVector::zeros(0),
    };
    Ok(Dataset { x, y, predictors: cols.iter().map(|&c| header[c].clone()).collect() })
}

/// Minimal CSV table writer; floats use the shortest round-trip representation.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::Parse(format!("writing {}: {e}", path.display()));
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Parse(format!("writing {}: {e}", path.display())))?;
        write_bytes(path, &bytes)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = File::create(path).map_err(CliError::io(path))?;
    f.write_all(bytes).map_err(CliError::io(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Parse(format!("json: {e}")))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Reads any CSV written by this tool back as header + string rows.
pub fn read_table(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| CliError::Parse(e.to_string()))?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()).map_err(|e| CliError::Parse(e.to_string())))
        .collect::<CliResult<_>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_response_and_reports_rows() {
        let d = parse_dataset("a,y,b\n1,2,3\n4,5,6\n".as_bytes(), Some("y")).unwrap();
        assert_eq!(d.predictors, vec!["a", "b"]);
        assert_eq!(d.y.as_slice(), &[2.0, 5.0]);
        assert_eq!(d.x[(1, 1)], 6.0);

        let e = parse_dataset("a,y\n1,2\n3,oops\n".as_bytes(), Some("y")).unwrap_err();
        assert!(e.to_string().contains("row 2"), "{e}");
        let e = parse_dataset("a,b\n1,2\n".as_bytes(), Some("y")).unwrap_err();
        assert!(e.to_string().contains("'y'"));
    }
}
