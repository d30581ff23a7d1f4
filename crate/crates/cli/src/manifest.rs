use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::plan::Plan;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Resolved inputs and options; replay executes exactly this.
    pub config: Plan,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Output files relative to the output directory. Left out when the
    /// manifest is embedded inside one of those outputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

impl RunManifest {
    pub fn new(plan: Plan, inputs: &[PathBuf]) -> Result<Self, CliError> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: plan.command_name().to_string(),
            seed: plan.seed(),
            config: plan,
            inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_, _>>()?,
            outputs: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(path.display(), e.to_string()))
    }

    /// Errors if any recorded input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for d in &self.inputs {
            let now = digest_file(Path::new(&d.path))?;
            if now.sha256 != d.sha256 {
                return Err(CliError::Replay(format!("input {} changed since the recorded run", d.path)));
            }
        }
        Ok(())
    }
}
