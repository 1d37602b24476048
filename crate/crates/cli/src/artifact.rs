use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::fail::CliResult;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Envelope written around every JSON result.
#[derive(Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub tool_version: &'static str,
    pub command: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

impl<'a, T: Serialize> Artifact<'a, T> {
    pub fn new(command: &'a str, config_hash: &'a str, seed: u64, body: T) -> Self {
        Self {
            tool_version: TOOL_VERSION,
            command,
            config_hash,
            seed,
            body,
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the artifact to `path` when given and returns its JSON.
    pub fn emit(&self, path: Option<&Path>) -> CliResult<String> {
        let json = self.to_json()?;
        if let Some(p) = path {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, format!("{json}\n"))?;
        }
        Ok(json)
    }
}

/// `# key=value` provenance line placed at the top of CSV exports.
pub fn csv_preamble(config_hash: &str, seed: u64) -> String {
    format!("# tool_version={TOOL_VERSION} config_hash={config_hash} seed={seed}\n")
}
