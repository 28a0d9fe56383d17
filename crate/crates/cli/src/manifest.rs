//! One JSON manifest per run, written next to the primary output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub output_paths: Vec<PathBuf>,
    pub toolkit_version: String,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_paths: Vec::new(),
            seeds: BTreeMap::new(),
            output_paths: Vec::new(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, p: Option<&Path>) {
        if let Some(p) = p {
            self.config_paths.push(p.to_path_buf());
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.output_paths.push(p.into());
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> Result<PathBuf, CliError> {
        self.wall_clock_secs = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        let path = with_suffix(primary, ".manifest.json");
        let json = serde_json::to_vec_pretty(&self).map_err(|e| CliError::file(e.to_string()))?;
        std::fs::write(&path, json)
            .map_err(|e| CliError::file(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
