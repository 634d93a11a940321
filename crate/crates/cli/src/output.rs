//! Output directory handling: CSV tables, text reports, model files and the
//! run manifest with SHA-256 hashes of every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use asymnet::network::{write_model, Network, MODEL_VERSION};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    kind: &'a str,
    config_hash: String,
    seed: u64,
    asymnet_version: &'static str,
    model_format_version: u32,
    dataset_cache_version: u32,
    artifacts: BTreeMap<String, String>,
}

pub struct OutputDir {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::User(format!("cannot write {}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.artifacts.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.bytes(name, text.as_bytes())
    }

    /// Comma-separated table with a header row.
    pub fn csv<R: AsRef<[String]>>(&mut self, name: &str, header: &[&str], rows: &[R]) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for r in rows {
            w.write_record(r.as_ref()).map_err(|e| io_err(&path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(&path, e))?;
        self.bytes(name, &bytes)
    }

    pub fn model(&mut self, name: &str, net: &Network) -> Result<(), CliError> {
        let mut bytes = Vec::new();
        write_model(net, &mut bytes).map_err(|e| io_err(&self.path(name), e))?;
        self.bytes(name, &bytes)
    }

    /// Writes the canonical config and the manifest; call last.
    pub fn finish(mut self, cfg: &ExperimentConfig, kind: &str) -> Result<(), CliError> {
        self.text(CONFIG_COPY, &cfg.canonical())?;
        let manifest = Manifest {
            kind,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            asymnet_version: env!("CARGO_PKG_VERSION"),
            model_format_version: MODEL_VERSION,
            dataset_cache_version: asymnet::datasets::CACHE_VERSION,
            artifacts: std::mem::take(&mut self.artifacts),
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        let path = self.path(MANIFEST);
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

/// Shortest round-trip representation; NaN stays "NaN".
pub fn num(v: f64) -> String {
    format!("{v}")
}
