//! Command implementations and report writing for the `zmfc` tool.

pub mod commands;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;

/// One table cell. Numbers print in Rust's shortest round-trip form, in
/// scientific notation when very small or very large.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) if *v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e15) => format!("{v:e}"),
            Cell::Num(v) => format!("{v}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Bool(b) => json!(b),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| Value::Object(self.header.iter().cloned().zip(row.iter().map(Cell::json)).collect()))
            .collect();
        Value::Array(rows)
    }

    /// Column values by header name.
    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| &r[idx]).collect())
    }
}

/// Output of one command.
#[derive(Debug, Clone)]
pub struct Report {
    pub command: String,
    pub tables: Vec<Table>,
    pub summary: Value,
    pub pass: bool,
    /// Extra `(file name, contents)` pairs written verbatim.
    pub files: Vec<(String, String)>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_echo: Value,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, wall_time: f64) -> Self {
        Self {
            command: command.to_string(),
            config_echo: config.canonical(),
            config_hash: format!("{:016x}", config.hash()),
            seed: config.simulation.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time,
        }
    }
}

/// Writes every table, the summary and the manifest into `dir`.
pub fn write_report(report: &Report, manifest: &RunManifest, dir: &Path, format: Format) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for t in &report.tables {
        let (name, body) = match format {
            Format::Csv => (format!("{}.csv", t.name), t.to_csv()),
            Format::Json => (format!("{}.json", t.name), serde_json::to_string_pretty(&t.to_json())? + "\n"),
        };
        fs::write(dir.join(&name), body).with_context(|| format!("writing {name}"))?;
    }
    for (name, body) in &report.files {
        fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))?;
    }
    let summary = serde_json::to_string_pretty(&report.summary)? + "\n";
    fs::write(dir.join(format!("{}_summary.json", report.command)), summary)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_agree() {
        let mut t = Table::new("demo", &["t", "j", "pass"]);
        t.push(vec![0.25.into(), 1usize.into(), true.into()]);
        t.push(vec![f64::NAN.into(), 0usize.into(), false.into()]);
        t.push(vec![2.5e-17.into(), 2usize.into(), true.into()]);
        assert_eq!(t.to_csv(), "t,j,pass\n0.25,1,true\nNaN,0,false\n2.5e-17,2,true\n");
        let j = t.to_json();
        assert_eq!(j[0]["t"], json!(0.25));
        assert_eq!(j[1]["t"], Value::Null);
        assert_eq!(t.column("j").unwrap(), vec![&Cell::Int(1), &Cell::Int(0), &Cell::Int(2)]);
    }
}
