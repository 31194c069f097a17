//! Result tables, checksums and the JSON-lines run manifest.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use colored_sse::table::format_real;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Numeric CSV table with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{}", self.header.join(",")).expect("write to memory");
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|x| format_real(*x)).collect();
            writeln!(out, "{}", line.join(",")).expect("write to memory");
        }
        out
    }
}

/// A file produced by an experiment, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

impl OutputFile {
    pub fn csv(name: impl Into<String>, table: &Table) -> Self {
        Self {
            name: name.into(),
            contents: table.to_csv(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Measured quantity.
    pub value: f64,
    /// Human-readable acceptance condition.
    pub condition: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, value: f64, condition: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            value,
            condition: condition.into(),
        }
    }

    /// `value <= limit`, failing on NaN.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value <= limit, value, format!("<= {limit:e}"))
    }

    /// `lo <= value <= hi`, failing on NaN.
    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self::new(name, (lo..=hi).contains(&value), value, format!("in [{lo}, {hi}]"))
    }
}

/// Everything an experiment produced, before it is written to disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub summary: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub files: Vec<OutputFile>,
}

impl Report {
    pub fn scalar(&mut self, name: impl Into<String>, value: f64) {
        self.summary.push((name.into(), value));
    }

    pub fn check(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn file(&mut self, file: OutputFile) {
        self.files.push(file);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn summary_value(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub path: PathBuf,
    pub files: Vec<FileRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunInfo<'a> {
    pub config: &'a RunConfig,
    pub workers: usize,
    pub wall_clock_seconds: f64,
}

/// Writes every file of `report` under `dir`, then the manifest listing them.
pub fn write_run(dir: &Path, report: &Report, info: &RunInfo<'_>) -> io::Result<RunManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(report.files.len());
    for f in &report.files {
        let path = dir.join(&f.name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &f.contents)?;
        files.push(FileRecord {
            path: f.name.clone(),
            bytes: f.contents.len(),
            sha256: sha256_hex(&f.contents),
        });
    }

    let mut lines: Vec<Value> = vec![json!({
        "record": "run",
        "experiment": info.config.experiment.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": info.config,
        "workers": info.workers,
        "wall_clock_seconds": info.wall_clock_seconds,
        "pass": report.passed(),
    })];
    for (name, value) in &report.summary {
        lines.push(json!({"record": "summary", "name": name, "value": finite_or_text(*value)}));
    }
    for c in &report.checks {
        lines.push(json!({
            "record": "check",
            "name": c.name,
            "pass": c.pass,
            "value": finite_or_text(c.value),
            "condition": c.condition,
        }));
    }
    for f in &files {
        lines.push(json!({"record": "file", "path": f.path, "bytes": f.bytes, "sha256": f.sha256}));
    }

    let mut text = String::new();
    for line in lines {
        text.push_str(&serde_json::to_string(&line).map_err(io::Error::other)?);
        text.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text)?;
    Ok(RunManifest { path, files })
}

/// JSON has no NaN or infinity; spell those out.
fn finite_or_text(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(format_real(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_fixed_digits() {
        let mut t = Table::new(["t", "x"]);
        t.push(vec![0.0, 0.1]);
        t.push(vec![0.5, f64::NAN]);
        let text = String::from_utf8(t.to_csv()).unwrap();
        assert_eq!(
            text,
            "t,x\n0.0000000000000000e0,1.0000000000000001e-1\n5.0000000000000000e-1,nan\n"
        );
    }

    #[test]
    fn checksum_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn checks_fail_on_nan() {
        assert!(!Check::at_most("a", f64::NAN, 1.0).pass);
        assert!(!Check::within("b", f64::NAN, 0.0, 1.0).pass);
        assert!(Check::within("c", 0.5, 0.0, 1.0).pass);
    }
}
