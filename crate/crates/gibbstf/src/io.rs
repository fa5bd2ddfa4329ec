//! Point-pattern file format: a CSV with header `x,y[,mark]` (plus `z` in
//! three dimensions) and a sidecar JSON descriptor holding the carrier window.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Configuration, MarkedPoint, Window};

/// Sidecar descriptor for the carrier window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowDescriptor {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl WindowDescriptor {
    pub fn to_window(&self) -> Result<Window> {
        Window::new(self.lower.clone(), self.upper.clone())
    }
}

impl From<&Window> for WindowDescriptor {
    fn from(w: &Window) -> Self {
        Self {
            lower: w.lower().to_vec(),
            upper: w.upper().to_vec(),
        }
    }
}

/// Default sidecar path: `pattern.csv` → `pattern.window.json`.
pub fn default_sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("window.json")
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

/// Write `cfg` as CSV plus the sidecar window descriptor.
pub fn write_pattern(cfg: &Configuration, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
    let d = cfg.carrier().dim();
    if d > 3 {
        return Err(Error::InvalidArgument(format!(
            "pattern files support at most 3 dimensions, got {d}"
        )));
    }
    let has_marks = cfg.points().iter().any(|p| p.mark.is_some());
    let mut out = String::new();
    let mut header: Vec<&str> = AXIS_NAMES[..d].to_vec();
    if has_marks {
        header.push("mark");
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for p in cfg.points() {
        let mut row: Vec<String> = p.position.iter().map(|c| format!("{c}")).collect();
        if has_marks {
            row.push(p.mark.map(|m| format!("{m}")).unwrap_or_default());
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(csv_path, out).map_err(|source| Error::Io {
        path: csv_path.to_path_buf(),
        source,
    })?;
    let descriptor = WindowDescriptor::from(cfg.carrier());
    let json = serde_json::to_string_pretty(&descriptor).expect("descriptor serializes");
    fs::write(sidecar_path, json).map_err(|source| Error::Io {
        path: sidecar_path.to_path_buf(),
        source,
    })
}

/// Read a pattern written by [`write_pattern`].
pub fn read_pattern(csv_path: &Path, sidecar_path: &Path) -> Result<Configuration> {
    let sidecar_text = fs::read_to_string(sidecar_path).map_err(|source| Error::Io {
        path: sidecar_path.to_path_buf(),
        source,
    })?;
    let descriptor: WindowDescriptor =
        serde_json::from_str(&sidecar_text).map_err(|e| Error::Parse {
            path: sidecar_path.to_path_buf(),
            message: e.to_string(),
        })?;
    let carrier = descriptor.to_window()?;
    let d = carrier.dim();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| Error::Parse {
            path: csv_path.to_path_buf(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: csv_path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let mut coord_cols = Vec::new();
    for name in &AXIS_NAMES[..d] {
        let col = headers.iter().position(|h| h.trim() == *name).ok_or_else(|| Error::Parse {
            path: csv_path.to_path_buf(),
            message: format!("missing coordinate column {name:?}"),
        })?;
        coord_cols.push(col);
    }
    let mark_col = headers.iter().position(|h| h.trim() == "mark");

    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: csv_path.to_path_buf(),
            message: e.to_string(),
        })?;
        let parse = |col: usize| -> Result<f64> {
            record
                .get(col)
                .ok_or_else(|| Error::Parse {
                    path: csv_path.to_path_buf(),
                    message: format!("row {line}: missing column {col}"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    path: csv_path.to_path_buf(),
                    message: format!("row {line}: {e}"),
                })
        };
        let mut position = Vec::with_capacity(d);
        for &col in &coord_cols {
            position.push(parse(col)?);
        }
        let mark = match mark_col {
            Some(col) => match record.get(col).map(str::trim) {
                None | Some("") => None,
                Some(text) => Some(text.parse::<f64>().map_err(|e| Error::Parse {
                    path: csv_path.to_path_buf(),
                    message: format!("row {line}: bad mark: {e}"),
                })?),
            },
            None => None,
        };
        points.push(MarkedPoint::new(position, mark)?);
    }
    Configuration::new(points, carrier)
}
