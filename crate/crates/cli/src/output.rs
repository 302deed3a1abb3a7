//! Output bookkeeping. Every artifact starts with `#` lines naming the
//! command and the config hash; next to the primary output go the effective
//! config (`<out>.config.toml`) and a manifest (`<out>.manifest.json`) with
//! content hashes of every input and output. Timestamps appear only in the
//! manifest so that artifacts themselves are reproducible byte for byte.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use chartflow::Result;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn object_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub struct Run {
    command: &'static str,
    config: RunConfig,
    hash: String,
    seed: u64,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
}

impl Run {
    pub fn new(command: &'static str, config: RunConfig, seed: u64) -> Self {
        let hash = config.hash();
        Run {
            command,
            config,
            hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path)?;
        self.inputs.push((path.to_path_buf(), object_hash(&bytes)));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).map_err(|e| chartflow::Error::Parse {
            line: 0,
            msg: format!("{}: not UTF-8 ({e})", path.display()),
        })
    }

    /// Comment lines identifying the producing command and configuration.
    pub fn header(&self) -> String {
        format!(
            "# chartflow {} {}\n# config_hash={}\n# seed={}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.hash,
            self.seed
        )
    }

    /// Writes `header()` followed by `body`.
    pub fn write(&mut self, path: &Path, body: &[u8]) -> Result<()> {
        let mut bytes = self.header().into_bytes();
        bytes.extend_from_slice(body);
        self.write_raw(path, &bytes)
    }

    pub fn write_raw(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes)?;
        self.outputs.push((path.to_path_buf(), object_hash(bytes)));
        Ok(())
    }

    /// Writes the effective config and the manifest next to `primary`.
    pub fn finish(self, primary: &Path) -> Result<()> {
        let cfg_path = sibling(primary, "config.toml");
        std::fs::write(&cfg_path, self.config.to_toml())?;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let files = |v: &[(PathBuf, String)]| {
            v.iter()
                .map(|(p, h)| json!({ "path": p.display().to_string(), "hash": h }))
                .collect::<Vec<_>>()
        };
        let manifest = json!({
            "tool": "chartflow",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config_hash": self.hash,
            "config": cfg_path.display().to_string(),
            "seed": self.seed,
            "hash_algorithm": "sha256 over 'blob <len>\\0' + content",
            "inputs": files(&self.inputs),
            "outputs": files(&self.outputs),
            "timestamp": timestamp,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(sibling(primary, "manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// `dir/name.ext` → `dir/name.ext.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
