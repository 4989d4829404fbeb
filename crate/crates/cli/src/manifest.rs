use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use threadsum_core::config::{LoadedConfig, RunConfig, Source};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: &'static str,
    pub code_version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_hash: String,
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub error: Option<String>,
    #[serde(skip)]
    path: Option<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, loaded: &LoadedConfig, deterministic: bool, path: Option<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            status: "running",
            code_version: CODE_VERSION.to_string(),
            seed: loaded.config.seed,
            deterministic,
            config_hash: loaded.config.hash(),
            config: loaded.config.clone(),
            provenance: loaded.provenance.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
            error: None,
            path,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    /// Replaces the recorded config after a command adjusts it.
    pub fn set_config(&mut self, config: &RunConfig) {
        self.config_hash = config.hash();
        self.config = config.clone();
    }

    pub fn write(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn finish(&mut self, result: &anyhow::Result<()>) -> std::io::Result<()> {
        self.finished_at = Some(now());
        match result {
            Ok(()) => self.status = "ok",
            Err(e) => {
                self.status = "failed";
                self.error = Some(format!("{e:#}"));
            }
        }
        self.write()
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}
