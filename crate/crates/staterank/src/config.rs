//! Run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use staterank_core::reranker::RerankMode;
use staterank_core::tensor::Precision;

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub head: PathBuf,
    pub reranker: PathBuf,
    pub cache: PathBuf,
    pub embeddings: PathBuf,
    /// Layer selection string as accepted by `LayerSelection::parse`.
    pub layers: String,
    pub k: usize,
    pub mode: RerankMode,
    pub precision: Precision,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "model.srwt".into(),
            head: "head.srhd".into(),
            reranker: "reranker.srrw".into(),
            cache: "cache.scr".into(),
            embeddings: "embeddings.jsonl".into(),
            layers: "full".into(),
            k: 10,
            mode: RerankMode::Offline,
            precision: Precision::F64,
            seed: 0,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsio::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Error unless `path` names an existing file.
pub fn require(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Data(format!("{}: file not found", path.display())))
    }
}
