//! Run manifests and the artifact writer that stamps every output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use umid_core::io::sha256_hex;

use crate::error::CliResult;

pub const MANIFEST_FORMAT: &str = "umid-manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub env_seed: Option<String>,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub tool_version: String,
    /// Hash of command, configuration and version; repeated in every output.
    pub run_id: String,
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Collects the outputs of one command invocation.
pub struct Run {
    pub manifest: RunManifest,
}

impl Run {
    pub fn start(
        command: &str,
        argv: Vec<String>,
        env_seed: Option<String>,
        config: BTreeMap<String, String>,
        seeds: BTreeMap<String, u64>,
    ) -> Self {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let identity = serde_json::json!({
            "command": command,
            "config": config,
            "seeds": seeds,
            "version": tool_version,
        });
        let run_id = sha256_hex(identity.to_string().as_bytes());
        Self {
            manifest: RunManifest {
                format: MANIFEST_FORMAT.into(),
                command: command.into(),
                argv,
                cwd: std::env::current_dir().unwrap_or_default(),
                env_seed,
                config,
                seeds,
                artifacts: Vec::new(),
                tool_version,
                run_id,
                started_at_unix: now(),
                finished_at_unix: 0.0,
            },
        }
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    fn record(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        self.manifest.artifacts.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// JSON object output with a `run_id` field.
    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> CliResult<()> {
        let mut v = serde_json::to_value(value)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("run_id".into(), self.run_id().into());
        }
        let bytes = serde_json::to_vec_pretty(&v)?;
        self.record(path, &bytes)
    }

    /// Line-oriented output (CSV, JSONL, text) with a `# run_id=` trailer.
    pub fn write_lines(&mut self, path: &Path, content: &str) -> CliResult<()> {
        let mut text = content.to_string();
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&format!("# run_id={}\n", self.run_id()));
        self.record(path, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, path: &Path, items: &[T]) -> CliResult<()> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item)?);
            text.push('\n');
        }
        self.write_lines(path, &text)
    }

    pub fn finish(mut self, manifest_path: &Path) -> CliResult<RunManifest> {
        self.manifest.finished_at_unix = now();
        if let Some(parent) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(manifest_path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

pub fn load_manifest(path: &Path) -> CliResult<RunManifest> {
    let bytes = std::fs::read(path)
        .map_err(|e| crate::error::CliError::missing(format!("manifest {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}
