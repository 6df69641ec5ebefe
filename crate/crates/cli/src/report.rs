//! Report assembly and CSV output.

use crate::config::RunConfig;
use crate::error::CliError;
use rte_core::fit::LineFit;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub name: String,
    pub x: String,
    pub y: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
    /// Half-width of the 95% band on the slope.
    pub slope_ci95: f64,
    pub points: usize,
    pub predicted: Option<f64>,
    pub note: Option<String>,
}

impl FitReport {
    pub fn new(name: &str, x: &str, y: &str, fit: &LineFit, predicted: Option<f64>) -> Self {
        Self {
            name: name.into(),
            x: x.into(),
            y: y.into(),
            slope: fit.slope,
            intercept: fit.intercept,
            r2: fit.r2,
            slope_stderr: fit.slope_stderr,
            slope_ci95: fit.slope_ci95,
            points: fit.points,
            predicted,
            note: None,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// The key-value document as given, after command-line overrides.
    pub config_input: serde_json::Value,
    pub config_resolved: RunConfig,
    pub timings: Vec<Timing>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub fits: Vec<FitReport>,
    pub checks: Vec<Check>,
    pub flags: Vec<String>,
    pub notes: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig, input: &toml::Table) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config_input: serde_json::to_value(input).unwrap_or(serde_json::Value::Null),
            config_resolved: config.clone(),
            timings: Vec::new(),
            metrics: serde_json::Map::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            flags: Vec::new(),
            notes: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn metric<T: Serialize>(&mut self, key: &str, value: T) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.metrics.insert(key.into(), v);
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn failed_checks(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn write_json(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// A CSV cell. Floats are written with 17 significant digits.
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.into())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::S(String::new()), Cell::F)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => format!("{v:.16e}"),
            Cell::I(v) => v.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<Cell>>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush()?;
    Ok(())
}
