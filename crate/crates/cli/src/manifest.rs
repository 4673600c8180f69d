use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{sha256_hex, OutputDir, OutputFile};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written at the root of every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Command line as given.
    pub command: Vec<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub inputs: Vec<InputFile>,
    /// Every file written, excluding the manifest itself.
    pub outputs: Vec<OutputFile>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: Vec<String>, workers: usize) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config_sha256: None,
            seed: None,
            workers,
            started_unix_s: now_unix(),
            finished_unix_s: 0.0,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Lists the outputs of `out` and writes the manifest into it.
    pub fn finish(mut self, out: &mut OutputDir) -> Result<Self> {
        self.outputs = out.files().to_vec();
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.finished_unix_s = now_unix();
        out.write_json(MANIFEST_NAME, &self)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_outputs_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("b.txt", b"b").unwrap();
        out.write("a.txt", b"a").unwrap();
        let m = RunManifest::new(vec!["x".into()], 1).finish(&mut out).unwrap();
        assert_eq!(m.outputs.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a.txt", "b.txt"]);
        assert_eq!(m.outputs[0].sha256, sha256_hex(b"a"));
        let back: RunManifest = serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_NAME)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
