use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "experiment.json";

/// Record of one command invocation, written before any result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Files the command writes, relative to `out_dir`.
    pub artifacts: Vec<String>,
}

impl ExperimentManifest {
    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    #[cfg(test)]
    pub fn read(dir: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = ExperimentManifest {
            command: "train".into(),
            config: serde_json::json!({ "epochs": 3 }),
            seed: 7,
            out_dir: dir.path().join("run"),
            artifacts: vec!["metrics.csv".into()],
        };
        m.write().unwrap();
        assert_eq!(ExperimentManifest::read(&m.out_dir).unwrap(), m);
    }
}
