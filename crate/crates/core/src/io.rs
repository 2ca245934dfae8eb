//! Plain-text grids and matrices, and 16-bit PGM dumps.
//!
//! CSV numbers use Rust's shortest round-trip formatting, so writing then
//! reading a grid is lossless and output bytes depend only on the values.

use std::fmt::Write as _;
use std::path::Path;

use crate::cost::CostMatrix;
use crate::error::{shape_mismatch, Error, Result};
use crate::grid::GridMap;

/// Parses comma- or whitespace-separated rows of floats. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: cannot parse {t:?} as a number", ln + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("line {}: non-finite value", ln + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn format_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> String {
    let mut out = String::new();
    for row in rows {
        for (k, x) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{x}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn grid_to_csv(g: &GridMap) -> String {
    format_rows(g.weights().chunks(g.side()))
}

/// A square block of nonnegative numbers as a grid.
pub fn grid_from_csv(text: &str) -> Result<GridMap> {
    let rows = parse_rows(text)?;
    let side = rows.len();
    if side == 0 {
        return Err(Error::Parse("empty grid".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != side) {
        return Err(shape_mismatch(
            format!("{side} rows"),
            format!("a row of {} values", r.len()),
        ));
    }
    GridMap::new(side, rows.concat())
}

pub fn read_grid(path: &Path) -> Result<GridMap> {
    grid_from_csv(&read_text(path)?)
}

pub fn write_grid(path: &Path, g: &GridMap) -> Result<()> {
    Ok(std::fs::write(path, grid_to_csv(g))?)
}

/// Every number in the file, row-major. Accepts a row, a column or a grid.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let v = parse_rows(&read_text(path)?)?.concat();
    if v.is_empty() {
        return Err(Error::Parse(format!("{}: no values", path.display())));
    }
    Ok(v)
}

pub fn read_matrix(path: &Path) -> Result<CostMatrix> {
    let rows = parse_rows(&read_text(path)?)?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse(format!("{}: empty matrix", path.display())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(shape_mismatch(
            format!("{n} cost rows"),
            format!("a cost row of {} values", r.len()),
        ));
    }
    CostMatrix::new(n, rows.concat())
}

pub fn matrix_to_csv(n: usize, data: &[f64]) -> String {
    format_rows(data.chunks(n))
}

/// Binary 16-bit PGM scaled so the heaviest cell is 65535.
pub fn grid_to_pgm(g: &GridMap) -> Vec<u8> {
    let side = g.side();
    let max = g.max_weight();
    let mut out = format!("P5\n{side} {side}\n65535\n").into_bytes();
    for w in g.weights() {
        let v = if max > 0.0 {
            (w / max * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, g: &GridMap) -> Result<()> {
    Ok(std::fs::write(path, grid_to_pgm(g))?)
}
