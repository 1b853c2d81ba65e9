//! Run directories and their manifests.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

/// Written once into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub created: String,
    pub seed: u64,
    pub category: String,
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    /// Command-specific facts such as the heatmap scale.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    pub version: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed: cfg.seed,
            category: cfg.data.category.clone(),
            config_sha256: cfg.hash(),
            checkpoint: None,
            checkpoint_sha256: None,
            extra: Default::default(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_checkpoint(mut self, path: &Path) -> Result<Self> {
        self.checkpoint_sha256 = Some(sha256_file(path)?);
        self.checkpoint = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(mdps_core::perception::sha256_file(path)?)
}

/// A freshly created, uniquely named directory `<parent>/<command>-<UTC time>[-k]`.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(parent: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        for k in 0.. {
            let name = match k {
                0 => format!("{command}-{stamp}"),
                k => format!("{command}-{stamp}-{k}"),
            };
            let path = parent.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Creates a new file; existing artifacts are never overwritten.
    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        std::io::Write::write_all(&mut f, contents.as_ref()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Stores the resolved configuration next to the outputs.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<PathBuf> {
        self.write(CONFIG, cfg.to_toml())
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        self.write_json(MANIFEST, manifest)
    }
}
