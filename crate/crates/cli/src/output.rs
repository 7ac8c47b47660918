//! Output directory handling; every file is written in one piece so reruns are byte-stable.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.canonical_json().as_bytes()))
}

pub struct OutDir {
    pub root: PathBuf,
    header: String,
}

impl OutDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        let header = format!("# carleman-dpm {VERSION} config-sha256={}\n", config_hash(cfg));
        let dir = Self { root: root.to_path_buf(), header };
        let mut resolved = serde_json::to_string_pretty(cfg).expect("config serializes");
        resolved.push('\n');
        dir.write_raw("config.resolved.json", &resolved)?;
        Ok(dir)
    }

    pub fn write_raw(&self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn csv(&self, name: &str) -> Csv {
        Csv { name: name.to_string(), body: self.header.clone() }
    }

    pub fn finish(&self, csv: Csv) -> Result<(), CliError> {
        self.write_raw(&csv.name, &csv.body)
    }
}

/// In-memory CSV starting with the version/hash comment line.
pub struct Csv {
    name: String,
    body: String,
}

impl Csv {
    /// Extra `# key=value` metadata line.
    pub fn meta(&mut self, line: &str) -> &mut Self {
        self.body.push_str("# ");
        self.body.push_str(line);
        self.body.push('\n');
        self
    }

    pub fn row(&mut self, line: &str) -> &mut Self {
        self.body.push_str(line);
        self.body.push('\n');
        self
    }
}

/// Fixed-width scientific formatting used in every numeric column.
pub fn num(v: f64) -> String {
    format!("{v:.12e}")
}
