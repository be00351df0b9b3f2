//! Artifact emission. Every file carries the config hash and tool version:
//! CSV/text artifacts as a leading `#` comment line, JSON artifacts as
//! top-level fields. File names are `<command>-<hash prefix>.<suffix>` so
//! re-running a config overwrites its own outputs byte-for-byte.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct ArtifactSink {
    out_dir: PathBuf,
    stem: String,
    config_hash: String,
    written: Vec<PathBuf>,
}

impl ArtifactSink {
    pub fn new(out_dir: &Path, command: &str, config_hash: &str) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            stem: format!("{command}-{}", &config_hash[..8]),
            config_hash: config_hash.to_string(),
            written: Vec::new(),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Relative file names emitted so far, for cross-referencing summaries.
    pub fn written(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .collect()
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}.{suffix}", self.stem))
    }

    /// CSV or aligned-text body behind a provenance comment line.
    pub fn table(&mut self, suffix: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.path(suffix);
        let header = format!(
            "# tool=adama-lab {TOOL_VERSION} config_sha256={}\n",
            self.config_hash
        );
        fs::write(&path, format!("{header}{body}"))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// JSON object with provenance fields injected at the top level.
    pub fn json(&mut self, suffix: &str, value: serde_json::Value) -> Result<PathBuf, CliError> {
        let mut doc = serde_json::Map::new();
        doc.insert("tool_version".into(), TOOL_VERSION.into());
        doc.insert("config_sha256".into(), self.config_hash.clone().into());
        match value {
            serde_json::Value::Object(m) => doc.extend(m),
            other => {
                doc.insert("data".into(), other);
            }
        }
        let path = self.path(suffix);
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))
            .map_err(adama_core::Error::from)?;
        text.push('\n');
        fs::write(&path, text)?;
        self.written.push(path.clone());
        Ok(path)
    }
}
