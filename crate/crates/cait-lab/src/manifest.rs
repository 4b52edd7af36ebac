//! Run manifests: the fully resolved configuration of a command, written
//! to the output directory before any computation starts. Re-running a
//! command with the parameters recorded in a manifest reproduces its
//! outputs; the content hash fingerprints everything the run depends on.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{LabError, Result};

pub const MANIFEST_FILE: &str = "run.manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Fully materialized configuration, including every default.
    pub config: Vec<(String, String)>,
    pub content_hash: String,
    pub out_dir: String,
}

/// Hex SHA-256 over the given byte sections.
pub fn content_hash(sections: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for s in sections {
        hasher.update((s.len() as u64).to_le_bytes());
        hasher.update(s);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(
        command: impl Into<String>,
        seed: u64,
        config: Vec<(String, String)>,
        hash_sections: &[&[u8]],
        out_dir: &Path,
    ) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            config,
            content_hash: content_hash(hash_sections),
            out_dir: out_dir.display().to_string(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("command {}\n", self.command));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("content_hash {}\n", self.content_hash));
        out.push_str(&format!("out_dir {}\n", self.out_dir));
        out.push_str("config\n");
        for (k, v) in &self.config {
            out.push_str(&format!("  {k} {v}\n"));
        }
        out
    }

    /// Write into the run's output directory (created if needed).
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, self.render()).map_err(|e| LabError::io(&path, e))
    }

    /// Look up a resolved config value.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}
