//! Report plumbing: every report carries a header with tool version, seed,
//! and an echo of the effective configuration, and is written atomically
//! (temp file in the target directory, then rename).

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Header {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: Value,
}

impl Header {
    pub fn new(seed: u64, config: Value) -> Self {
        Header {
            tool: "knnmt",
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
        }
    }

    /// Single-line form for CSV reports.
    pub fn csv_comment(&self) -> String {
        format!(
            "# knnmt {} seed={} config={}",
            self.version, self.seed, self.config
        )
    }
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::io(&format!("creating temp file in {}", dir.display()), e))?;
    use std::io::Write;
    tmp.write_all(contents)
        .map_err(|e| CliError::io("writing report", e))?;
    tmp.persist(path)
        .map_err(|e| CliError::io("renaming report into place", e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_vec_pretty(value).expect("report serializes");
    body.push(b'\n');
    write_atomic(path, &body)
}
