//! CSV/JSON plumbing shared by the pipeline and the CLI.
//!
//! Floats are written with 17 significant digits so every value round-trips
//! exactly. Files are written to a sibling temp file and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{CoordinateTable, Mat};

/// Fixed-width scientific rendering with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(&r).map_err(to_io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    atomic_write(path, &csv_bytes(&header, rows)?)
}

/// Header plus records, with 1-based file line numbers for each record.
pub struct CsvTable {
    pub header: Vec<String>,
    pub records: Vec<(u64, Vec<String>)>,
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let perr = |line: u64, message: String| Error::Parse { path: path.display().to_string(), line, message };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
            _ => perr(1, e.to_string()),
        })?;
    let header: Vec<String> = r.headers().map_err(|e| perr(1, e.to_string()))?.iter().map(str::to_string).collect();
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        records.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(CsvTable { header, records })
}

pub(crate) fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { path: path.display().to_string(), line, message: "non-finite value".into() });
    }
    Ok(v)
}

pub(crate) fn parse_usize(path: &Path, line: u64, field: &str) -> Result<usize> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("not a non-negative integer: {field:?}"),
    })
}

fn expect_header(path: &Path, table: &CsvTable, expected: &[&str]) -> Result<()> {
    if table.header.len() != expected.len() || table.header.iter().zip(expected).any(|(a, b)| a.trim() != *b) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

/// `id,x,y`
pub fn write_coords(path: &Path, table: &CoordinateTable) -> Result<()> {
    let rows = (0..table.len()).map(|i| {
        let p = table.point(i);
        vec![table.ids[i].clone(), fmt_f64(p[0]), fmt_f64(p[1])]
    });
    write_csv(path, &["id", "x", "y"], rows)
}

pub fn read_coords(path: &Path) -> Result<CoordinateTable> {
    let t = read_csv(path)?;
    expect_header(path, &t, &["id", "x", "y"])?;
    let mut ids = Vec::with_capacity(t.records.len());
    let mut coords = Mat::zeros(t.records.len(), 2);
    for (row, (line, rec)) in t.records.iter().enumerate() {
        ids.push(rec[0].trim().to_string());
        coords[(row, 0)] = parse_f64(path, *line, &rec[1])?;
        coords[(row, 1)] = parse_f64(path, *line, &rec[2])?;
    }
    CoordinateTable::new(ids, coords)
}

/// Labeled dense matrix: `id,<col names...>`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Mat,
}

pub fn write_labeled_matrix(path: &Path, m: &LabeledMatrix) -> Result<()> {
    let mut header = vec!["id".to_string()];
    header.extend(m.columns.iter().cloned());
    let rows = (0..m.values.nrows()).map(|i| {
        let mut r = vec![m.ids[i].clone()];
        r.extend((0..m.values.ncols()).map(|j| fmt_f64(m.values[(i, j)])));
        r
    });
    atomic_write(path, &csv_bytes(&header, rows)?)
}

pub fn read_labeled_matrix(path: &Path) -> Result<LabeledMatrix> {
    let t = read_csv(path)?;
    if t.header.first().map(|h| h.trim()) != Some("id") {
        return Err(Error::Parse { path: path.display().to_string(), line: 1, message: "first column must be id".into() });
    }
    let columns: Vec<String> = t.header[1..].to_vec();
    let mut ids = Vec::with_capacity(t.records.len());
    let mut values = Mat::zeros(t.records.len(), columns.len());
    for (row, (line, rec)) in t.records.iter().enumerate() {
        ids.push(rec[0].trim().to_string());
        for j in 0..columns.len() {
            values[(row, j)] = parse_f64(path, *line, &rec[j + 1])?;
        }
    }
    Ok(LabeledMatrix { ids, columns, values })
}

/// `id,domain`
pub fn write_labels(path: &Path, ids: &[String], labels: &[usize], column: &str) -> Result<()> {
    let rows = ids.iter().zip(labels).map(|(id, l)| vec![id.clone(), l.to_string()]);
    write_csv(path, &["id", column], rows)
}

pub fn read_labels(path: &Path, column: &str) -> Result<(Vec<String>, Vec<usize>)> {
    let t = read_csv(path)?;
    expect_header(path, &t, &["id", column])?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in &t.records {
        ids.push(rec[0].trim().to_string());
        labels.push(parse_usize(path, *line, &rec[1])?);
    }
    Ok((ids, labels))
}
