use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dnas_core::io::{read_json, write_json_atomic};
use dnas_core::Result;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    /// Space configuration used, relative to the manifest's directory when
    /// copied there.
    pub space_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lut_path: Option<PathBuf>,
    pub device_label: Option<String>,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub argv: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            space_path: None,
            seed: None,
            lut_path: None,
            device_label: None,
            out_dir: out_dir.to_path_buf(),
            started_unix: unix_now(),
            finished_unix: 0,
            argv: std::env::args().collect(),
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = unix_now();
        write_json_atomic(self.out_dir.join(MANIFEST_FILE), &self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(dir.join(MANIFEST_FILE))
    }
}
