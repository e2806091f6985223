//! Text formats: sample tables (CSV or GeoEAS), GSLIB grid files, matrices
//! and the correlation field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::manifold::CorrMatrix;
use crate::neighborhood::Point;
use crate::samples::SampleSet;
use crate::simulate::CorrelationField;

fn parse_error(source: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads samples from CSV (header `x,y,z,v1..vp`) or GeoEAS. Files whose
/// first line contains a comma are read as CSV.
pub fn read_samples(path: &Path) -> Result<SampleSet> {
    let text = read_text(path)?;
    parse_samples(&text, path)
}

pub fn parse_samples(text: &str, source: &Path) -> Result<SampleSet> {
    let first = text.lines().next().ok_or_else(|| parse_error(source, 1, "empty file"))?;
    if first.contains(',') {
        parse_csv_samples(text, source)
    } else {
        parse_geoeas_samples(text, source)
    }
}

fn assemble(names: Vec<String>, rows: Vec<Vec<f64>>, source: &Path) -> Result<SampleSet> {
    if names.len() < 4 {
        return Err(parse_error(source, 1, "expected columns x, y, z and at least one variable"));
    }
    if rows.is_empty() {
        return Err(parse_error(source, 2, "no data rows"));
    }
    let p = names.len() - 3;
    let locations = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
    let columns = (0..p).map(|v| rows.iter().map(|r| r[3 + v]).collect()).collect();
    SampleSet::new(locations, columns, names[3..].to_vec())
}

fn parse_csv_samples(text: &str, source: &Path) -> Result<SampleSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(source, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_error(source, line, e.to_string()))?;
        if record.len() != names.len() {
            return Err(parse_error(
                source,
                line,
                format!("expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_error(source, line, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    assemble(names, rows, source)
}

fn parse_geoeas_samples(text: &str, source: &Path) -> Result<SampleSet> {
    let mut lines = text.lines().enumerate();
    lines.next();
    let (_, count) = lines.next().ok_or_else(|| parse_error(source, 2, "missing variable count"))?;
    let nvar: usize = count
        .split_whitespace()
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|_| parse_error(source, 2, "variable count must be an integer"))?;
    let mut names = Vec::with_capacity(nvar);
    for _ in 0..nvar {
        let (i, name) = lines
            .next()
            .ok_or_else(|| parse_error(source, 3 + names.len(), "missing variable name"))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(parse_error(source, i + 1, "empty variable name"));
        }
        names.push(name.to_string());
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| parse_error(source, i + 1, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != nvar {
            return Err(parse_error(
                source,
                i + 1,
                format!("expected {nvar} values, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    assemble(names, rows, source)
}

pub fn samples_to_csv(samples: &SampleSet) -> String {
    let mut out = String::from("x,y,z");
    for n in samples.names() {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for i in 0..samples.len() {
        let u = samples.location(i);
        let _ = write!(out, "{},{},{}", u[0], u[1], u[2]);
        for v in samples.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// GSLIB grid file: title, variable count, names, then one row per node in
/// grid order. Non-finite values are written as `no_data`.
pub fn gslib_grid(title: &str, names: &[String], values: &[f64], no_data: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", names.len());
    for n in names {
        let _ = writeln!(out, "{n}");
    }
    let stride = names.len().max(1);
    for row in values.chunks(stride) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let v = if v.is_finite() { *v } else { no_data };
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a GSLIB grid file into names and node-major values, mapping
/// `no_data` to `NaN`.
pub fn parse_gslib_grid(text: &str, source: &Path, no_data: f64) -> Result<(Vec<String>, Vec<f64>)> {
    let mut lines = text.lines().enumerate();
    lines.next().ok_or_else(|| parse_error(source, 1, "empty file"))?;
    let (_, count) = lines.next().ok_or_else(|| parse_error(source, 2, "missing variable count"))?;
    let nvar: usize = count
        .split_whitespace()
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|_| parse_error(source, 2, "variable count must be an integer"))?;
    let mut names = Vec::with_capacity(nvar);
    for k in 0..nvar {
        let (_, name) = lines.next().ok_or_else(|| parse_error(source, 3 + k, "missing variable name"))?;
        names.push(name.trim().to_string());
    }
    let mut values = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| parse_error(source, i + 1, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != nvar {
            return Err(parse_error(source, i + 1, format!("expected {nvar} values, found {}", row.len())));
        }
        values.extend(row.into_iter().map(|v| if v == no_data { f64::NAN } else { v }));
    }
    Ok((names, values))
}

/// First line `p`, then `p` rows of 17-significant-digit decimals.
pub fn matrix_to_text(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", m.nrows());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn matrix_from_text(text: &str, source: &Path) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_error(source, 1, "empty matrix"))?;
    let p: usize = first
        .trim()
        .parse()
        .map_err(|_| parse_error(source, 1, "first line must be the dimension"))?;
    let mut m = DMatrix::zeros(p, p);
    for i in 0..p {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| parse_error(source, i + 2, format!("expected {p} rows")))?;
        let row = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| parse_error(source, line_no + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != p {
            return Err(parse_error(source, line_no + 1, format!("expected {p} columns")));
        }
        for (j, v) in row.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// CSV with node index, coordinates, upper-triangle entries, residual and
/// status. Masked nodes carry `no_data` entries.
pub fn correlation_field_csv(field: &CorrelationField, targets: &[Point], p: usize, no_data: f64) -> String {
    let mut out = String::from("node,x,y,z");
    for i in 0..p {
        for j in (i + 1)..p {
            let _ = write!(out, ",rho_{}_{}", i + 1, j + 1);
        }
    }
    out.push_str(",residual,status\n");
    let n_upper = p * (p - 1) / 2;
    for (node, u) in targets.iter().enumerate() {
        let _ = write!(out, "{node},{},{},{}", u[0], u[1], u[2]);
        match &field.matrices[node] {
            Some(c) => {
                for v in c.upper() {
                    let _ = write!(out, ",{v}");
                }
            }
            None => {
                for _ in 0..n_upper {
                    let _ = write!(out, ",{no_data}");
                }
            }
        }
        let status = match field.status[node] {
            crate::simulate::NodeStatus::Estimated => "estimated",
            crate::simulate::NodeStatus::Fallback => "fallback",
            crate::simulate::NodeStatus::Masked => "masked",
        };
        let _ = writeln!(out, ",{:e},{status}", field.residuals[node]);
    }
    out
}

/// Reads a correlation matrix in the plain-text matrix format.
pub fn corr_from_text(text: &str, source: &Path) -> Result<CorrMatrix> {
    CorrMatrix::new(matrix_from_text(text, source)?)
}
