//! Long-format CSV tables and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// One CSV cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    /// Floats use 17 significant digits, so reruns diff bit-exactly.
    pub fn render(&self) -> String {
        match self {
            Cell::Float(x) if x.is_finite() => format!("{x:.16e}"),
            Cell::Float(x) => x.to_string(),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as u64)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_owned())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Float)
    }
}

/// A named CSV table.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Self { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<String> {
        let file = format!("{}.csv", self.name);
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.flush()?;
        Ok(file)
    }
}

/// Pass/fail of one suite with its summary statistics.
#[derive(Clone, Debug, Serialize)]
pub struct Suite {
    pub name: String,
    pub pass: bool,
    pub stats: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
}

impl Suite {
    pub fn new(name: impl Into<String>, pass: bool) -> Self {
        Self { name: name.into(), pass, stats: BTreeMap::new(), wall_time_secs: 0.0 }
    }

    pub fn stat(mut self, key: &str, value: f64) -> Self {
        self.stats.insert(key.to_owned(), value);
        self
    }
}

/// What an experiment produced.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub tables: Vec<Table>,
    pub suites: Vec<Suite>,
}

impl Report {
    pub fn pass(&self) -> bool {
        self.suites.iter().all(|s| s.pass)
    }
}

/// The JSON record written next to the CSVs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub toolkit: String,
    pub version: String,
    pub experiment: String,
    pub pass: bool,
    pub suites: Vec<Suite>,
    pub csv: Vec<String>,
    pub wall_time_secs: f64,
    /// The resolved configuration, with command-line overrides applied.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
