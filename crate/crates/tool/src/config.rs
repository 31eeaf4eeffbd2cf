//! Declarative experiment configuration shared by every subcommand.
//!
//! A TOML file supplies defaults, command-line flags override it field by
//! field, and [`ExperimentConfig::check_fields`] rejects keys that the chosen
//! subcommand would silently ignore.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use snn_core::coarse::CoarseModel;
use snn_core::encoding::EncodingKind;
use snn_core::training::{LossKind, OptimizerKind};
use snn_core::transfer::InputTiming;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Mnist,
    Fmnist,
}

impl Dataset {
    pub fn dir_name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Fmnist => "fashion",
        }
    }
}

fn parse_model(s: &str) -> Result<CoarseModel, String> {
    s.parse().map_err(|e: snn_core::Error| e.to_string())
}
fn parse_encoding(s: &str) -> Result<EncodingKind, String> {
    s.parse().map_err(|e: snn_core::Error| e.to_string())
}
fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: snn_core::Error| e.to_string())
}
fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse().map_err(|e: snn_core::Error| e.to_string())
}
fn parse_timing(s: &str) -> Result<InputTiming, String> {
    s.parse().map_err(|e: snn_core::Error| e.to_string())
}

/// Every knob of every driver. Unset fields fall back to the driver defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory for this run.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Directory holding `mnist/` and `fashion/` IDX files.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<Dataset>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the bit-reproducible sequential mode.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,

    // network
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long, value_parser = parse_encoding)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoding: Option<EncodingKind>,
    /// Spike train length N_sp.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// τ/τ_r
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[arg(long, value_parser = parse_model)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<CoarseModel>,

    // training
    #[arg(long, value_parser = parse_loss)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    /// Target spike count of the correct class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nout: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,

    // eval / transfer
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Independent re-encodings of the test set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[arg(long, value_parser = parse_timing)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<InputTiming>,

    // sweeps
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nouts: Option<Vec<usize>>,

    // validation
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neurons: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    /// Simulated time per instance, in units of τ_r.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drive_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drive_max: Option<f64>,

    // reinforcement learning
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elite_percentile: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

macro_rules! set_fields {
    ($cfg:ident; $($f:ident),* $(,)?) => {{
        let mut v: Vec<&'static str> = Vec::new();
        $( if $cfg.$f.is_some() { v.push(stringify!($f)); } )*
        v
    }};
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Fields set in `flags` replace the ones in `self`.
    pub fn merge(mut self, flags: &ExperimentConfig) -> Self {
        overlay!(self, flags;
            out, data_dir, dataset, seed, threads, preset, encoding, steps, beta, ratio,
            model, loss, nout, optimizer, lr, epochs, batch_size, train_limit, test_limit,
            checkpoint, repeats, timing, betas, nouts, neurons, density, ratios, instances,
            duration, drive_min, drive_max, hidden, batches, episodes, elite_percentile,
            alpha, target);
        self
    }

    pub fn set_fields(&self) -> Vec<&'static str> {
        set_fields!(self;
            out, data_dir, dataset, seed, threads, preset, encoding, steps, beta, ratio,
            model, loss, nout, optimizer, lr, epochs, batch_size, train_limit, test_limit,
            checkpoint, repeats, timing, betas, nouts, neurons, density, ratios, instances,
            duration, drive_min, drive_max, hidden, batches, episodes, elite_percentile,
            alpha, target)
    }

    /// Rejects fields the subcommand does not use.
    pub fn check_fields(&self, command: &str, allowed: &[&str]) -> Result<(), CliError> {
        const COMMON: [&str; 3] = ["out", "seed", "threads"];
        let bad: Vec<&str> = self
            .set_fields()
            .into_iter()
            .filter(|f| !COMMON.contains(f) && !allowed.contains(f))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "option(s) not valid for `{command}`: {}",
                bad.join(", ")
            )))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: ExperimentConfig = toml::from_str("epochs = 3\nseed = 7\npreset = \"shallow\"").unwrap();
        let flags = ExperimentConfig {
            epochs: Some(5),
            ..Default::default()
        };
        let merged = file.merge(&flags);
        assert_eq!(merged.epochs, Some(5));
        assert_eq!(merged.seed, Some(7));
        assert_eq!(merged.preset.as_deref(), Some("shallow"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("epochz = 3").unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn enums_parse_from_toml() {
        let c: ExperimentConfig =
            toml::from_str("model = \"II\"\nencoding = \"periodic\"\ndataset = \"fmnist\"\nratios = [1.0, 2.0]")
                .unwrap();
        assert_eq!(c.model, Some(CoarseModel::II));
        assert_eq!(c.encoding, Some(EncodingKind::Periodic));
        assert_eq!(c.dataset, Some(Dataset::Fmnist));
        assert_eq!(c.ratios, Some(vec![1.0, 2.0]));
    }

    #[test]
    fn toml_echo_round_trips() {
        let c = ExperimentConfig {
            preset: Some("shallow".into()),
            betas: Some(vec![1.0, 3.0]),
            model: Some(CoarseModel::III),
            ..Default::default()
        };
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn fields_outside_the_command_are_rejected() {
        let c = ExperimentConfig {
            neurons: Some(10),
            epochs: Some(1),
            ..Default::default()
        };
        assert!(c.check_fields("train", &["epochs"]).is_err());
        assert!(c.check_fields("validate", &["neurons", "epochs"]).is_ok());
    }
}
