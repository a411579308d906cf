//! CSV trajectories and JSON documents.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::trainer::Trajectory;

use super::IoError;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn csv_header(depth: usize) -> String {
    let mut h = String::from("iter,loss,nc1");
    for m in 1..=depth {
        write!(h, ",nc2_{m}").expect("writing to a String");
    }
    h.push_str(",nc3,balance_max");
    h
}

/// One row per sample. Metric cells are empty when not recorded or
/// degenerate; a single-entry NC2 (GOF) fills only the last NC2 column.
pub fn trajectory_csv(traj: &Trajectory, depth: usize) -> String {
    let mut out = csv_header(depth);
    out.push('\n');
    for (i, (&it, &loss)) in traj.iterations.iter().zip(&traj.losses).enumerate() {
        let mut row = vec![it.to_string(), format_float(loss)];
        match traj.reports.get(i) {
            Some(r) => {
                row.push(format_float(r.nc1));
                let mut nc2 = vec![None; depth];
                let offset = depth - r.nc2.len().min(depth);
                for (j, v) in r.nc2.iter().take(depth).enumerate() {
                    nc2[offset + j] = *v;
                }
                row.extend(nc2.into_iter().map(cell));
                row.push(cell(r.nc3));
                row.push(format_float(r.balance_max()));
            }
            None => row.extend(std::iter::repeat_n(String::new(), depth + 3)),
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a trajectory table back into `(header, rows)`; empty cells are `None`.
pub fn parse_trajectory_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>), IoError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| IoError::Table("empty table".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|_| IoError::Table(format!("row {}: bad number {c:?}", n + 1)))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(IoError::Table(format!(
                "row {} has {} cells, expected {}",
                n + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| IoError::file(path, e))
}
