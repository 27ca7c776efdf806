use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use curate_core::augment::ChannelNorm;
use curate_core::config::RunConfig;
use curate_core::data::ImageDataset;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub kind: String,
    pub train_fingerprint: String,
    pub train_count: usize,
    pub test_fingerprint: Option<String>,
    pub test_count: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormRecord {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Everything needed to rerun a command: the full configuration text, the
/// dataset's content hash and where it was read from.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: String,
    pub dataset: DatasetRecord,
    pub data_root: Option<PathBuf>,
    pub input_norm: Option<NormRecord>,
    pub threshold: Option<f64>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, train: &ImageDataset, data_root: Option<&Path>, started: u64) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.train.seed,
            config: cfg.to_text(),
            dataset: DatasetRecord {
                kind: cfg.data.dataset.to_string(),
                train_fingerprint: train.fingerprint(),
                train_count: train.len(),
                test_fingerprint: None,
                test_count: None,
            },
            data_root: data_root.map(Path::to_path_buf),
            input_norm: None,
            threshold: None,
            outputs: BTreeMap::new(),
            started_unix_ms: started,
            finished_unix_ms: started,
        }
    }

    pub fn with_test(mut self, test: &ImageDataset) -> Self {
        self.dataset.test_fingerprint = Some(test.fingerprint());
        self.dataset.test_count = Some(test.len());
        self
    }

    pub fn set_norm(&mut self, norm: Option<&ChannelNorm>) {
        self.input_norm = norm.map(|n| NormRecord {
            mean: n.mean.clone(),
            std: n.std.clone(),
        });
    }

    pub fn norm(&self) -> Option<ChannelNorm> {
        self.input_norm.as_ref().map(|n| ChannelNorm {
            mean: n.mean.clone(),
            std: n.std.clone(),
        })
    }

    pub fn run_config(&self) -> Result<RunConfig, Failure> {
        Ok(RunConfig::parse(&self.config)?)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: invalid manifest: {e}", path.display())))
    }

    /// The manifest in the directory holding `checkpoint`.
    pub fn beside(checkpoint: &Path) -> Result<Self, Failure> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        Self::read(&dir.join(MANIFEST_FILE))
    }
}
