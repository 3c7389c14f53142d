//! Series and matrix files, config echo and key=value config files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{fmt_f64, parse_matrix_csv, Mat, Vector};

/// Version tag carried by every report.
pub const SCHEMA_VERSION: u32 = 1;

fn is_header(line: &str) -> bool {
    line.split(',').any(|cell| cell.trim().parse::<f64>().is_err())
}

/// Parses CSV text into rows. A first line with a non-numeric cell is taken
/// as a header; `#` lines and blank lines are skipped.
pub fn parse_series(text: &str) -> Result<Vec<Vector>> {
    let mut rows = Vec::new();
    let mut width = None;
    let mut seen_first = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_first {
            seen_first = true;
            if is_header(line) {
                width = Some(line.split(',').count());
                continue;
            }
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {w} values, found {}", cells.len()),
                })
            }
            _ => width = Some(cells.len()),
        }
        let row = rows.len() + 1;
        let mut values = Vec::with_capacity(cells.len());
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row,
                    col: j + 1,
                    msg: format!("non-finite value {cell}"),
                });
            }
            values.push(v);
        }
        rows.push(Vector::from_vec(values));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            msg: "no data rows".into(),
        });
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_series(path: &Path) -> Result<Vec<Vector>> {
    parse_series(&read_text(path)?)
}

/// One row per time point, 17 significant digits.
pub fn format_series(data: &[Vector], header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for y in data {
        let row: Vec<String> = y.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_series(path: &Path, data: &[Vector], header: Option<&[String]>) -> Result<()> {
    fs::write(path, format_series(data, header))?;
    Ok(())
}

/// Column names `prefix1, …, prefixp`.
pub fn column_names(prefix: &str, p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("{prefix}{i}")).collect()
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    parse_matrix_csv(&read_text(path)?)
}

/// Resolved configuration reproduced at the top of every report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigEcho {
    entries: Vec<(String, String)>,
}

impl ConfigEcho {
    pub fn new(command: &str) -> Self {
        let mut echo = ConfigEcho::default();
        echo.push("schema_version", SCHEMA_VERSION);
        echo.push("command", command);
        echo
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `# key=value` lines.
    pub fn to_header(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "# {k}={v}");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

/// Parses `key=value` lines. A leading `#` is stripped, so a report header can
/// be fed back as a config file; lines without `=` are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim().trim_start_matches('#').trim();
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("invalid key '{key}'"),
            });
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into command-line tokens for `command`. Keys are
/// either global (`seed`) or prefixed with the command name (`fit.phi`);
/// other sections and bookkeeping keys are skipped. `true` becomes a bare
/// flag, `false` and empty values are dropped.
pub fn config_to_args(entries: &[(String, String)], command: &str, globals: &[&str]) -> Vec<String> {
    let mut args = Vec::new();
    for (key, value) in entries {
        let name = if globals.contains(&key.as_str()) {
            key.as_str()
        } else if let Some(rest) = key.strip_prefix(command).and_then(|r| r.strip_prefix('.')) {
            rest
        } else {
            continue;
        };
        match value.as_str() {
            "" | "false" => {}
            "true" => args.push(format!("--{name}")),
            v => {
                args.push(format!("--{name}"));
                args.push(v.to_string());
            }
        }
    }
    args
}
