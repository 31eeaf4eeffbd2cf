//! Parameter sweeps over the surrogate slope and the target spike count.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::IdxDataset;
use crate::error::Error;
use crate::network::{Network, NetworkSpec};
use crate::training::{train, EpochMetrics, TrainConfig};
use crate::transfer::{transfer_evaluate, TransferConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// The swept value (β or N_out).
    pub value: f64,
    pub coarse_accuracy: f64,
    /// Accuracy of the same weights on exact LIF neurons, when measured.
    pub fine_accuracy: Option<f64>,
}

pub struct SweepRun {
    pub point: SweepPoint,
    pub checkpoint: ModelCheckpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn final_accuracy(metrics: &[EpochMetrics]) -> f64 {
    metrics
        .last()
        .and_then(|m| m.test_accuracy)
        .unwrap_or(f64::NAN)
}

/// Trains one network per slope `β` (applied to every spiking layer).
pub fn beta_sweep(
    spec: &NetworkSpec,
    train_set: &IdxDataset,
    test_set: &IdxDataset,
    config: &TrainConfig,
    betas: &[f64],
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepRun>, Error> {
    let mut out = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut spec = spec.clone();
        spec.map_cells(|c| c.beta = beta);
        spec.validate()?;
        let net = Network::init(spec, config.seed)?;
        let outcome = train(net, train_set, test_set, config, |_| {})?;
        let point = SweepPoint {
            value: beta,
            coarse_accuracy: final_accuracy(&outcome.metrics),
            fine_accuracy: None,
        };
        on_point(&point);
        out.push(SweepRun {
            point,
            checkpoint: outcome.checkpoint,
            metrics: outcome.metrics,
        });
    }
    Ok(out)
}

/// Trains one network per target count and measures coarse and fine accuracy.
pub fn nout_sweep(
    spec: &NetworkSpec,
    train_set: &IdxDataset,
    test_set: &IdxDataset,
    config: &TrainConfig,
    n_outs: &[usize],
    transfer: &TransferConfig,
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepRun>, Error> {
    let mut out = Vec::with_capacity(n_outs.len());
    for &n_out in n_outs {
        let mut cfg = config.clone();
        cfg.loss.n_out = n_out;
        let net = Network::init(spec.clone(), cfg.seed)?;
        let outcome = train(net, train_set, test_set, &cfg, |_| {})?;
        let t = transfer_evaluate(&outcome.checkpoint.network, test_set, transfer)?;
        let point = SweepPoint {
            value: n_out as f64,
            coarse_accuracy: final_accuracy(&outcome.metrics),
            fine_accuracy: Some(t.fine_accuracy),
        };
        on_point(&point);
        out.push(SweepRun {
            point,
            checkpoint: outcome.checkpoint,
            metrics: outcome.metrics,
        });
    }
    Ok(out)
}
