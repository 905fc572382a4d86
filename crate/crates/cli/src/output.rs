//! Artifact writing: series tables as CSV or JSON, reports as JSON, every file
//! written through a temporary file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::scenario::Format;

/// Column-oriented numeric series. Column names carry their unit suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Two-column series from (x, y) pairs.
    pub fn pairs(x: &str, y: &str, data: &[(f64, f64)]) -> Self {
        let mut s = Self::new(&[x, y]);
        for &(a, b) in data {
            s.push(vec![a, b]);
        }
        s
    }

    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Failed(format!("csv encoding failed: {e}"));
        w.write_record(&self.columns).map_err(fail)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format_number(*v))).map_err(fail)?;
        }
        w.into_inner().map_err(|e| CliError::Failed(format!("csv encoding failed: {e}")))
    }

    pub fn to_json(&self) -> CliResult<Vec<u8>> {
        #[derive(Serialize)]
        struct Doc<'a> {
            columns: &'a [String],
            rows: Vec<Vec<Option<f64>>>,
        }
        // JSON has no NaN; missing values become null
        let rows = self.rows.iter().map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect()).collect();
        to_json_bytes(&Doc { columns: &self.columns, rows })
    }
}

/// Shortest round-trip text; exponent form outside [1e-3, 1e6).
pub fn format_number(v: f64) -> String {
    if v == 0.0 || !v.is_finite() || (1e-3..1e6).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| CliError::Failed(format!("json encoding failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

/// Collects the files one run writes into its output directory.
#[derive(Debug)]
pub struct ArtifactSink {
    pub dir: PathBuf,
    pub format: Format,
    pub written: Vec<PathBuf>,
}

impl ArtifactSink {
    pub fn new(dir: impl Into<PathBuf>, format: Format) -> Self {
        Self { dir: dir.into(), format, written: Vec::new() }
    }

    /// Write a series as `<stem>.csv` or `<stem>.json`.
    pub fn series(&mut self, stem: &str, s: &Series) -> CliResult<PathBuf> {
        let (ext, bytes) = match self.format {
            Format::Csv => ("csv", s.to_csv()?),
            Format::Json => ("json", s.to_json()?),
        };
        self.bytes(&format!("{stem}.{ext}"), &bytes)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        self.bytes(name, &to_json_bytes(value)?)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }
}

#[derive(Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
}

/// Run record kept next to the data. Only `started_unix_s` and `wall_time_s`
/// change between identical runs.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, I: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub inputs: &'a I,
    pub artifacts: Vec<ArtifactEntry>,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
}

pub fn artifact_entries(dir: &Path, paths: &[PathBuf]) -> Vec<ArtifactEntry> {
    paths
        .iter()
        .map(|p| ArtifactEntry {
            path: p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"),
            bytes: fs::metadata(p).map(|m| m.len()).unwrap_or(0),
        })
        .collect()
}
