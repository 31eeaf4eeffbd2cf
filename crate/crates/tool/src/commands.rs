//! One driver per subcommand. Each validates its whole configuration before
//! touching data, then writes its artifacts into the run directory.

use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use snn_core::cartpole::{cem_train, CemBatch, CemConfig};
use snn_core::checkpoint::ModelCheckpoint;
use snn_core::coarse::CoarseCellParams;
use snn_core::data::{load_split, IdxDataset, Split};
use snn_core::network::{build_preset_with, Network, NetworkSpec, PresetOptions};
use snn_core::sweeps::{beta_sweep, nout_sweep, SweepPoint};
use snn_core::training::{evaluate, train as train_network, EpochMetrics, EvalConfig, LossSpec, TrainConfig};
use snn_core::transfer::{transfer_evaluate, TransferConfig};
use snn_core::validation::{correlation_experiment, median_r, CorrelationConfig, LOW_ACTIVITY};

use crate::config::{Dataset, ExperimentConfig};
use crate::output::RunDir;
use crate::CliError;

const NETWORK: [&str; 6] = ["preset", "encoding", "steps", "beta", "ratio", "model"];
const TRAINING: [&str; 9] = [
    "data_dir",
    "dataset",
    "loss",
    "nout",
    "optimizer",
    "lr",
    "epochs",
    "batch_size",
    "train_limit",
];

pub const DEFAULT_BETAS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
pub const DEFAULT_NOUTS: [usize; 4] = [2, 4, 6, 8];

fn allowed(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn threads(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    match cfg.threads.unwrap_or(1) {
        0 => Err(CliError::Usage("threads must be at least 1".into())),
        n => Ok(n),
    }
}

/// Runs `f` on a pool of `--threads` workers.
fn in_pool<T>(cfg: &ExperimentConfig, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads(cfg)?)
        .build()
        .context("building thread pool")?;
    pool.install(f)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    let dataset = cfg.dataset.unwrap_or(Dataset::Mnist);
    cfg.data_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("data"))
        .join(dataset.dir_name())
}

fn load(cfg: &ExperimentConfig, split: Split) -> Result<IdxDataset, CliError> {
    Ok(load_split(&data_dir(cfg), split).map_err(snn_core::Error::from)?)
}

fn network_spec(cfg: &ExperimentConfig) -> Result<NetworkSpec, CliError> {
    let mut cell = CoarseCellParams::default();
    if let Some(m) = cfg.model {
        cell.model = m;
    }
    if let Some(r) = cfg.ratio {
        cell.ratio = r;
    }
    if let Some(b) = cfg.beta {
        cell.beta = b;
    }
    let mut opts = PresetOptions {
        cell,
        ..PresetOptions::default()
    };
    if let Some(n) = cfg.steps {
        opts.n_steps = n;
    }
    if let Some(e) = cfg.encoding {
        opts.encoding = e;
    }
    let spec = build_preset_with(cfg.preset.as_deref().unwrap_or("shallow"), &opts)?;
    spec.validate()?;
    Ok(spec)
}

fn train_config(cfg: &ExperimentConfig, n_steps: usize) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let mut loss = LossSpec::default();
    if let Some(k) = cfg.loss {
        loss.kind = k;
    }
    if let Some(n) = cfg.nout {
        loss.n_out = n;
    }
    let tc = TrainConfig {
        epochs: cfg.epochs.unwrap_or(d.epochs),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
        optimizer: cfg.optimizer.unwrap_or(d.optimizer),
        lr: cfg.lr,
        loss,
        seed: cfg.seed.unwrap_or(d.seed),
        threads: threads(cfg)?,
        train_limit: cfg.train_limit,
        test_limit: cfg.test_limit,
        eval_every_epoch: true,
    };
    tc.validate()?;
    tc.loss.validate(n_steps)?;
    Ok(tc)
}

fn load_checkpoint(cfg: &ExperimentConfig) -> Result<ModelCheckpoint, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    Ok(ModelCheckpoint::load(path).map_err(snn_core::Error::from)?)
}

fn log_epoch(m: &EpochMetrics) {
    match m.test_accuracy {
        Some(acc) => eprintln!("epoch {:>3}  loss {:.5}  test {:.2}%", m.epoch, m.train_loss, acc),
        None => eprintln!("epoch {:>3}  loss {:.5}", m.epoch, m.train_loss),
    }
}

pub fn train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.check_fields("train", &allowed(&[&NETWORK, &TRAINING, &["test_limit"]]))?;
    let spec = network_spec(cfg)?;
    let tc = train_config(cfg, spec.n_steps)?;
    let train_set = load(cfg, Split::Train)?;
    let test_set = load(cfg, Split::Test)?;

    let out = RunDir::create(cfg, "train")?;
    out.write_config(cfg)?;
    let net = Network::init(spec, tc.seed)?;
    let n_params = net.n_params();
    let outcome = in_pool(cfg, || Ok(train_network(net, &train_set, &test_set, &tc, log_epoch)?))?;
    out.write_csv(&outcome.metrics)?;
    outcome
        .checkpoint
        .save(out.path("model.ckpt"))
        .map_err(snn_core::Error::from)?;
    let last = outcome.metrics.last();
    out.write_summary(json!({
        "preset": outcome.checkpoint.network.spec.name,
        "dataset": cfg.dataset.unwrap_or(Dataset::Mnist),
        "parameters": n_params,
        "epochs": tc.epochs,
        "final_train_loss": last.map(|m| m.train_loss),
        "test_accuracy": last.and_then(|m| m.test_accuracy),
        "checkpoint": "model.ckpt",
    }))
}

#[derive(Serialize)]
struct EvalRow {
    run: usize,
    n_steps: usize,
    accuracy: f64,
}

pub fn eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.check_fields(
        "eval",
        &["checkpoint", "data_dir", "dataset", "steps", "encoding", "repeats", "test_limit", "batch_size"],
    )?;
    let ckpt = load_checkpoint(cfg)?;
    let d = EvalConfig::default();
    let ec = EvalConfig {
        n_steps: cfg.steps,
        encoding: cfg.encoding,
        repeats: cfg.repeats.unwrap_or(d.repeats),
        seed: cfg.seed.unwrap_or(d.seed),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
        limit: cfg.test_limit,
    };
    if ec.repeats == 0 || ec.batch_size == 0 || ec.n_steps == Some(0) {
        return Err(CliError::Usage("repeats, batch size and steps must be positive".into()));
    }
    snn_core::training::eval_encoding(&ckpt.network, ec.encoding)?;
    let test_set = load(cfg, Split::Test)?;

    let out = RunDir::create(cfg, "eval")?;
    out.write_config(cfg)?;
    let res = in_pool(cfg, || Ok(evaluate(&ckpt.network, &test_set, &ec)?))?;
    let n_steps = ec.n_steps.unwrap_or(ckpt.network.spec.n_steps);
    let rows: Vec<EvalRow> = res
        .runs
        .iter()
        .enumerate()
        .map(|(run, &accuracy)| EvalRow { run, n_steps, accuracy })
        .collect();
    out.write_csv(&rows)?;
    out.write_summary(json!({
        "checkpoint": cfg.checkpoint,
        "trained_steps": ckpt.network.spec.n_steps,
        "n_steps": n_steps,
        "accuracy_mean": res.mean,
        "accuracy_std": res.std,
    }))
}

#[derive(Serialize)]
struct TransferRow {
    samples: usize,
    coarse_accuracy: f64,
    fine_accuracy: f64,
    gap: f64,
    agreement: f64,
}

pub fn transfer(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.check_fields(
        "transfer",
        &["checkpoint", "data_dir", "dataset", "steps", "timing", "test_limit", "batch_size"],
    )?;
    let ckpt = load_checkpoint(cfg)?;
    let d = TransferConfig::default();
    let tc = TransferConfig {
        seed: cfg.seed.unwrap_or(d.seed),
        limit: cfg.test_limit,
        n_steps: cfg.steps,
        timing: cfg.timing.unwrap_or(d.timing),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
    };
    if tc.batch_size == 0 || tc.n_steps == Some(0) {
        return Err(CliError::Usage("batch size and steps must be positive".into()));
    }
    let test_set = load(cfg, Split::Test)?;

    let out = RunDir::create(cfg, "transfer")?;
    out.write_config(cfg)?;
    let r = in_pool(cfg, || Ok(transfer_evaluate(&ckpt.network, &test_set, &tc)?))?;
    out.write_csv(&[TransferRow {
        samples: r.samples,
        coarse_accuracy: r.coarse_accuracy,
        fine_accuracy: r.fine_accuracy,
        gap: r.gap(),
        agreement: r.agreement,
    }])?;
    out.write_summary(json!({
        "checkpoint": cfg.checkpoint,
        "samples": r.samples,
        "coarse_accuracy": r.coarse_accuracy,
        "fine_accuracy": r.fine_accuracy,
        "gap": r.gap(),
        "agreement": r.agreement,
    }))
}

#[derive(Serialize)]
struct ValidateRow {
    seed: u64,
    ratio: f64,
    mean_activity: f64,
    #[serde(rename = "r_I")]
    r_i: Option<f64>,
    #[serde(rename = "r_II")]
    r_ii: Option<f64>,
    #[serde(rename = "r_III")]
    r_iii: Option<f64>,
}

pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.check_fields(
        "validate",
        &["neurons", "density", "ratios", "instances", "duration", "drive_min", "drive_max"],
    )?;
    let d = CorrelationConfig::default();
    let cc = CorrelationConfig {
        n_neurons: cfg.neurons.unwrap_or(d.n_neurons),
        density: cfg.density.unwrap_or(d.density),
        ratios: cfg.ratios.clone().unwrap_or(d.ratios.clone()),
        instances: cfg.instances.unwrap_or(d.instances),
        drive_min: cfg.drive_min.unwrap_or(d.drive_min),
        drive_max: cfg.drive_max.unwrap_or(d.drive_max),
        duration: cfg.duration.unwrap_or(d.duration),
        seed: cfg.seed.unwrap_or(d.seed),
        ..d
    };
    cc.validate()?;

    let out = RunDir::create(cfg, "validate")?;
    out.write_config(cfg)?;
    let rows = in_pool(cfg, || Ok(correlation_experiment(&cc)?))?;
    let csv: Vec<ValidateRow> = rows
        .iter()
        .map(|r| ValidateRow {
            seed: r.seed,
            ratio: r.ratio,
            mean_activity: r.mean_activity,
            r_i: r.r[0],
            r_ii: r.r[1],
            r_iii: r.r[2],
        })
        .collect();
    out.write_csv(&csv)?;
    let all = median_r(&rows, |_| true);
    let low = median_r(&rows, |r| r.mean_activity < LOW_ACTIVITY);
    let low_count = rows.iter().filter(|r| r.mean_activity < LOW_ACTIVITY).count();
    out.write_summary(json!({
        "networks": rows.len(),
        "median_r": { "I": all[0], "II": all[1], "III": all[2] },
        "low_activity_threshold": LOW_ACTIVITY,
        "low_activity_networks": low_count,
        "median_r_low_activity": { "I": low[0], "II": low[1], "III": low[2] },
    }))
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    coarse_accuracy: f64,
    fine_accuracy: Option<f64>,
}

impl From<&SweepPoint> for SweepRow {
    fn from(p: &SweepPoint) -> Self {
        Self {
            value: p.value,
            coarse_accuracy: p.coarse_accuracy,
            fine_accuracy: p.fine_accuracy,
        }
    }
}

fn log_point(name: &str) -> impl Fn(&SweepPoint) + '_ {
    move |p| match p.fine_accuracy {
        Some(f) => eprintln!("{name} {}: coarse {:.2}%  fine {:.2}%", p.value, p.coarse_accuracy, f),
        None => eprintln!("{name} {}: {:.2}%", p.value, p.coarse_accuracy),
    }
}

pub fn sweep_beta(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let network: Vec<&str> = NETWORK.iter().copied().filter(|&f| f != "beta").collect();
    cfg.check_fields("sweep-beta", &allowed(&[&network, &TRAINING, &["test_limit", "betas"]]))?;
    let spec = network_spec(cfg)?;
    let tc = train_config(cfg, spec.n_steps)?;
    let betas = cfg.betas.clone().unwrap_or(DEFAULT_BETAS.to_vec());
    if betas.is_empty() {
        return Err(CliError::Usage("--betas is empty".into()));
    }
    for &b in &betas {
        let mut s = spec.clone();
        s.map_cells(|c| c.beta = b);
        s.validate()?;
    }
    let train_set = load(cfg, Split::Train)?;
    let test_set = load(cfg, Split::Test)?;

    let out = RunDir::create(cfg, "sweep-beta")?;
    out.write_config(cfg)?;
    let runs = in_pool(cfg, || {
        Ok(beta_sweep(&spec, &train_set, &test_set, &tc, &betas, log_point("beta"))?)
    })?;
    let mut files = Vec::new();
    for r in &runs {
        let name = format!("model_beta_{}.ckpt", r.point.value);
        r.checkpoint.save(out.path(&name)).map_err(snn_core::Error::from)?;
        files.push(name);
    }
    let rows: Vec<SweepRow> = runs.iter().map(|r| (&r.point).into()).collect();
    out.write_csv(&rows)?;
    let accs: Vec<f64> = runs.iter().map(|r| r.point.coarse_accuracy).collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    out.write_summary(json!({
        "betas": betas,
        "test_accuracy": accs,
        "spread": spread,
        "checkpoints": files,
    }))
}

pub fn sweep_nout(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let training: Vec<&str> = TRAINING.iter().copied().filter(|&f| f != "nout").collect();
    cfg.check_fields(
        "sweep-nout",
        &allowed(&[&NETWORK, &training, &["test_limit", "nouts", "timing"]]),
    )?;
    let spec = network_spec(cfg)?;
    let nouts = cfg.nouts.clone().unwrap_or(DEFAULT_NOUTS.to_vec());
    if nouts.is_empty() {
        return Err(CliError::Usage("--nouts is empty".into()));
    }
    let tc = train_config(cfg, spec.n_steps)?;
    for &n in &nouts {
        LossSpec { n_out: n, ..tc.loss }.validate(spec.n_steps)?;
    }
    let xc = TransferConfig {
        seed: tc.seed,
        limit: tc.test_limit,
        timing: cfg.timing.unwrap_or_default(),
        ..TransferConfig::default()
    };
    let train_set = load(cfg, Split::Train)?;
    let test_set = load(cfg, Split::Test)?;

    let out = RunDir::create(cfg, "sweep-nout")?;
    out.write_config(cfg)?;
    let runs = in_pool(cfg, || {
        Ok(nout_sweep(&spec, &train_set, &test_set, &tc, &nouts, &xc, log_point("n_out"))?)
    })?;
    let mut files = Vec::new();
    for r in &runs {
        let name = format!("model_nout_{}.ckpt", r.point.value);
        r.checkpoint.save(out.path(&name)).map_err(snn_core::Error::from)?;
        files.push(name);
    }
    let rows: Vec<SweepRow> = runs.iter().map(|r| (&r.point).into()).collect();
    out.write_csv(&rows)?;
    out.write_summary(json!({
        "nouts": nouts,
        "coarse_accuracy": runs.iter().map(|r| r.point.coarse_accuracy).collect::<Vec<_>>(),
        "fine_accuracy": runs.iter().map(|r| r.point.fine_accuracy).collect::<Vec<_>>(),
        "checkpoints": files,
    }))
}

pub fn rl(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.check_fields(
        "rl",
        &[
            "hidden",
            "steps",
            "beta",
            "ratio",
            "model",
            "lr",
            "batches",
            "episodes",
            "elite_percentile",
            "alpha",
            "target",
        ],
    )?;
    let d = CemConfig::default();
    let mut cell = d.cell;
    if let Some(m) = cfg.model {
        cell.model = m;
    }
    if let Some(r) = cfg.ratio {
        cell.ratio = r;
    }
    if let Some(b) = cfg.beta {
        cell.beta = b;
    }
    let cc = CemConfig {
        hidden: cfg.hidden.unwrap_or(d.hidden),
        n_steps: cfg.steps.unwrap_or(d.n_steps),
        alpha: cfg.alpha.unwrap_or(d.alpha),
        cell,
        episodes_per_batch: cfg.episodes.unwrap_or(d.episodes_per_batch),
        elite_percentile: cfg.elite_percentile.unwrap_or(d.elite_percentile),
        max_batches: cfg.batches.unwrap_or(d.max_batches),
        target_reward: cfg.target.unwrap_or(d.target_reward),
        lr: cfg.lr.unwrap_or(d.lr),
        seed: cfg.seed.unwrap_or(d.seed),
        ..d
    };
    cc.validate()?;

    let out = RunDir::create(cfg, "rl")?;
    out.write_config(cfg)?;
    let outcome = in_pool(cfg, || {
        Ok(cem_train(&cc, |b: &CemBatch| {
            eprintln!(
                "batch {:>3}  mean {:6.1}  moving {:6.1}",
                b.batch, b.mean_reward, b.moving_average
            )
        })?)
    })?;
    out.write_csv(&outcome.curve)?;
    outcome
        .checkpoint
        .save(out.path("policy.ckpt"))
        .map_err(snn_core::Error::from)?;
    out.write_summary(json!({
        "solved_at": outcome.solved_at,
        "batches": outcome.curve.len(),
        "final_moving_average": outcome.curve.last().map(|b| b.moving_average),
        "target": cc.target_reward,
        "checkpoint": "policy.ckpt",
    }))
}
