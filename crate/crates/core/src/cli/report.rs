//! CSV tables and the run manifest.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::value::RateValue;

/// Shortest round-trip decimal (exponent form for extreme magnitudes), with `inf`, `-inf` and `nan` spelled out.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn rate(v: RateValue) -> String {
    num(v.value())
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Row-major entries separated by spaces, rows by `;`. Never needs quoting.
pub fn matrix_cell<R: AsRef<[f64]>>(rows: &[R]) -> String {
    rows.iter()
        .map(|r| {
            r.as_ref()
                .iter()
                .map(|v| num(*v))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn dmatrix_cell(m: &nalgebra::DMatrix<f64>) -> String {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect();
    matrix_cell(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width for {}", self.name);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| {
            cells
                .iter()
                .map(|c| {
                    if c.contains([',', '"', '\n']) {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(out, "{}", line(&self.header)).unwrap();
        for r in &self.rows {
            writeln!(out, "{}", line(r)).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NonConvergence,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub schema: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: Status,
    pub files: Vec<String>,
    pub diagnostics: serde_json::Value,
    /// Elapsed seconds; the only field that differs between identical runs.
    pub wall_time_seconds: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every table, then the manifest, into `dir`.
pub fn write_reports(dir: &Path, tables: &[Table], manifest: &Manifest) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in tables {
        std::fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
    }
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formatting() {
        assert_eq!(num(0.5), "0.5");
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(num(-2.0), "-2.0");
        assert_eq!(num(2.5e-13), "2.5e-13");
        assert_eq!(rate(RateValue::INFINITY), "inf");
        assert_eq!(
            matrix_cell(&[vec![1.0, 0.5], vec![0.5, 2.0]]),
            "1.0 0.5;0.5 2.0"
        );
    }

    #[test]
    fn csv_quoting() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec!["1".into(), "p,q".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,\"p,q\"\n");
    }
}
