use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// The only directory a run writes to.
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, command: &'static str) -> Result<Self, CliError> {
        let root = cfg
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command));
        std::fs::create_dir_all(&root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self { root, command })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<(), CliError> {
        let path = self.path("config.toml");
        std::fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn write_csv<R: Serialize>(&self, rows: &[R]) -> Result<(), CliError> {
        let path = self.path("metrics.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        for r in rows {
            w.serialize(r).context("serializing metrics row")?;
        }
        w.flush().context("flushing metrics.csv")?;
        Ok(())
    }

    pub fn write_summary(&self, results: Value) -> Result<(), CliError> {
        let path = self.path("summary.json");
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "results": results,
        });
        let text = serde_json::to_string_pretty(&doc).context("serializing summary")?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
