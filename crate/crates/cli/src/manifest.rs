use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved settings, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub started_unix_s: f64,
    pub elapsed_s: f64,
}

impl RunManifest {
    /// SHA-256 of the resolved config, hex.
    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.config)
    }
}

pub fn config_fingerprint(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Times a command and collects the files it writes.
pub struct Recorder {
    command: String,
    dir: PathBuf,
    started: SystemTime,
    clock: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            command: command.to_string(),
            dir: dir.to_path_buf(),
            started: SystemTime::now(),
            clock: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `contents` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn finish(self, config: serde_json::Value, seed: Option<u64>) -> anyhow::Result<RunManifest> {
        let mut versions = BTreeMap::new();
        versions.insert("geotrack".to_string(), geotrack::VERSION.to_string());
        versions.insert(
            "geotrack-cli".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        let manifest = RunManifest {
            command: self.command,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed,
            versions,
            started_unix_s: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            elapsed_s: self.clock.elapsed().as_secs_f64(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, geotrack::io::to_json(&manifest))
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(manifest)
    }
}
