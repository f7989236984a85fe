//! Run manifests: one append-only JSONL record per executed command, carrying
//! the effective config, seed, artifact fingerprints, and output paths. The
//! content hash covers everything except wall-clock timestamps so identical
//! seeded runs hash identically.

use crate::config::RunConfig;
use crate::error::{Result, SeasError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

/// Canonical hash of an effective run configuration.
pub fn config_hash(config: &RunConfig) -> String {
    config.hash()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Component fingerprints touched by this command.
    pub fingerprints: BTreeMap<String, String>,
    /// Paths relative to the run root.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash(config),
            seed: config.seed,
            fingerprints: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn record_fingerprint(&mut self, key: &str, fingerprint: &str) {
        self.fingerprints.insert(key.to_string(), fingerprint.to_string());
    }

    pub fn record_output(&mut self, path: &str) {
        self.outputs.push(path.to_string());
    }

    pub fn finish(&mut self) {
        self.finished_unix = now_unix();
    }

    /// Hash of the run-identity fields; timestamps excluded.
    pub fn content_hash(&self) -> String {
        let identity = (
            &self.command,
            &self.config_hash,
            self.seed,
            &self.fingerprints,
            &self.outputs,
        );
        let json = serde_json::to_string(&identity).expect("manifest serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }

    /// Append this record as one line to the run log.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(self)
            .map_err(|e| SeasError::Validation(format!("manifest encode: {}", e)))?;
        writeln!(f, "{}", line)?;
        Ok(())
    }
}

/// All records in a run log, oldest first.
pub fn read_manifests(path: &Path) -> Result<Vec<RunManifest>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SeasError::MissingArtifact(format!("{}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: RunManifest = serde_json::from_str(line).map_err(|e| SeasError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn content_hash_ignores_timestamps_only() {
        let cfg = RunConfig::micro();
        let mut a = RunManifest::start("train-gen", &cfg);
        a.record_fingerprint("vae", "abc");
        a.record_output("checkpoints/vae.ckpt");
        a.finish();
        let mut b = a.clone();
        b.started_unix += 100;
        b.finished_unix += 200;
        assert_eq!(a.content_hash(), b.content_hash());
        b.record_output("extra.png");
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn config_hash_tracks_config_changes() {
        let a = RunConfig::micro();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn log_is_append_only_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let cfg = RunConfig::micro();
        let mut m1 = RunManifest::start("gen-data", &cfg);
        m1.finish();
        m1.append_to(&path).unwrap();
        let mut m2 = RunManifest::start("pretrain-vae", &cfg);
        m2.record_fingerprint("vae", "ff00");
        m2.finish();
        m2.append_to(&path).unwrap();
        let all = read_manifests(&path).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].command, "gen-data");
        assert_eq!(all[1].fingerprints["vae"], "ff00");
        assert_eq!(all[1].content_hash(), m2.content_hash());
    }
}
