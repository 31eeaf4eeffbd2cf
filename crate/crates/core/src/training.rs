//! Losses, optimizers, and the training / evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Tape, Var};
use crate::checkpoint::{ModelCheckpoint, TrainingMeta};
use crate::data::IdxDataset;
use crate::encoding::{encode_batch, EncodedBatch, EncodingKind};
use crate::error::Error;
use crate::network::{argmax_rows, Network};
use crate::tensor::{Element, Tensor};

// RNG streams derived from the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_ENCODE: u64 = 2;
const STREAM_EVAL: u64 = 3;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared error between output spike counts and a target count.
    MseSpikeCount,
    /// Softmax cross-entropy over output spike counts.
    CrossEntropyActivity,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "mse" | "mse-spike-count" => Ok(LossKind::MseSpikeCount),
            "ce" | "cross-entropy" | "cross-entropy-activity" => Ok(LossKind::CrossEntropyActivity),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Target spike count of the correct output neuron.
    pub n_out: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::MseSpikeCount,
            n_out: 4,
        }
    }
}

impl LossSpec {
    pub fn validate(&self, n_steps: usize) -> Result<(), Error> {
        if self.n_out > n_steps {
            return Err(Error::Config(format!(
                "target count {} exceeds spike train length {n_steps}",
                self.n_out
            )));
        }
        Ok(())
    }

    /// Batch loss on a tape for activity `[B × C]`.
    pub fn on_tape<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        activity: Var<'t, T>,
        labels: &[usize],
    ) -> Result<Var<'t, T>, Error> {
        let shape = activity.shape();
        let classes = shape.last().copied().unwrap_or(0);
        match self.kind {
            LossKind::MseSpikeCount => {
                let target = count_targets(labels, classes, self.n_out)?;
                Ok(tape.mse(activity, target.reshape(&shape)?)?)
            }
            LossKind::CrossEntropyActivity => Ok(tape.softmax_ce(activity, labels)?),
        }
    }

    pub fn eval(&self, activity: &[f64], label: usize) -> Result<f64, Error> {
        match self.kind {
            LossKind::MseSpikeCount => loss_mse_count(activity, label, self.n_out),
            LossKind::CrossEntropyActivity => loss_ce_activity(activity, label),
        }
    }
}

fn count_targets<T: Element>(labels: &[usize], classes: usize, n_out: usize) -> Result<Tensor<T>, Error> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label { label: l, classes });
        }
        t.data_mut()[i * classes + l] = T::of(n_out as f64);
    }
    Ok(t)
}

/// Mean squared error between `a` and the one-hot target scaled to `n_out`.
pub fn loss_mse_count(a: &[f64], label: usize, n_out: usize) -> Result<f64, Error> {
    if label >= a.len() {
        return Err(Error::Label {
            label,
            classes: a.len(),
        });
    }
    let s: f64 = a
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let t = if i == label { n_out as f64 } else { 0.0 };
            (x - t).powi(2)
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `-ln softmax(a)[label]`.
pub fn loss_ce_activity(a: &[f64], label: usize) -> Result<f64, Error> {
    if label >= a.len() {
        return Err(Error::Label {
            label,
            classes: a.len(),
        });
    }
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = a.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - a[label])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Adam => 1e-3,
            OptimizerKind::Sgd => 0.1,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) or plain SGD.
pub struct Optimizer<T: Element = f32> {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), Error> {
        if params.len() != grads.len() {
            return Err(Error::Config("parameter/gradient count mismatch".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            p.check_same_shape(g, "optimizer step")?;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::of(self.lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                let step = T::of(self.lr / c1);
                let (b1, b2) = (T::of(b1), T::of(b2));
                let (one, eps, c2) = (T::one(), T::of(eps), T::of(c2));
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((x, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (one - b1) * d;
                        *vi = b2 * *vi + (one - b2) * d * d;
                        *x -= step * *mi / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Defaults to the optimizer's standard rate.
    pub lr: Option<f64>,
    pub loss: LossSpec,
    pub seed: u64,
    /// Gradient shards per batch; 1 is the sequential reference path.
    pub threads: usize,
    /// Use only the first `n` training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Evaluate on the test set after every epoch (otherwise only after the last).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            lr: None,
            loss: LossSpec::default(),
            seed: 0,
            threads: 1,
            train_limit: None,
            test_limit: None,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.optimizer.default_lr())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the epoch was not evaluated.
    pub test_accuracy: Option<f64>,
}

/// Loss and parameter gradients for one batch on a fresh tape.
pub fn batch_gradients(
    net: &Network<f32>,
    batch: &EncodedBatch<f32>,
    labels: &[usize],
    loss: &LossSpec,
) -> Result<(f64, Vec<Tensor<f32>>), Error> {
    let tape = Tape::new();
    let params = net.bind(&&tape);
    let out = net.forward(&&tape, &params, batch, false)?;
    let l = loss.on_tape(&tape, out.activity, labels)?;
    let value = l.value().item()? as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(l)?;
    Ok((value, params.iter().map(|p| p.grad()).collect()))
}

/// Splits the batch into `shards` contiguous pieces, computes their
/// gradients (in parallel when `pool` is given) and reduces them in shard
/// order, weighting each by its share of the batch.
fn sharded_gradients(
    net: &Network<f32>,
    batch: &EncodedBatch<f32>,
    labels: &[usize],
    loss: &LossSpec,
    shards: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<Tensor<f32>>), Error> {
    let b = labels.len();
    let shards = shards.clamp(1, b.max(1));
    if shards == 1 {
        return batch_gradients(net, batch, labels, loss);
    }
    let bounds: Vec<(usize, usize)> = (0..shards)
        .map(|i| (i * b / shards, (i + 1) * b / shards))
        .collect();
    let work = |&(s, e): &(usize, usize)| -> Result<(f64, Vec<Tensor<f32>>), Error> {
        batch_gradients(net, &batch.slice(s, e)?, &labels[s..e], loss)
    };
    let parts: Vec<Result<_, Error>> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            bounds.par_iter().map(work).collect()
        }),
        None => bounds.iter().map(work).collect(),
    };
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor<f32>>> = None;
    for (part, &(s, e)) in parts.into_iter().zip(&bounds) {
        let (l, g) = part?;
        let w = (e - s) as f64 / b as f64;
        total += w * l;
        if !l.is_finite() {
            return Ok((l, Vec::new()));
        }
        let g: Vec<Tensor<f32>> = g.iter().map(|t| t.scale(w as f32)).collect();
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    a.add_assign(x)?;
                }
            }
        }
    }
    Ok((total, grads.unwrap_or_default()))
}

/// Minibatch trainer holding a network and its optimizer state.
pub struct Trainer {
    pub network: Network<f32>,
    optimizer: Optimizer<f32>,
    loss: LossSpec,
    shards: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(network: Network<f32>, config: &TrainConfig) -> Result<Self, Error> {
        config.validate()?;
        config.loss.validate(network.spec.n_steps)?;
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            network,
            optimizer: Optimizer::new(config.optimizer, config.lr()),
            loss: config.loss,
            shards: config.threads,
            pool,
        })
    }

    /// One optimizer update. Returns the batch loss, or `None` when the loss
    /// is not finite (the weights are left untouched).
    pub fn step(
        &mut self,
        batch: &EncodedBatch<f32>,
        labels: &[usize],
    ) -> Result<Option<f64>, Error> {
        let (loss, grads) = sharded_gradients(
            &self.network,
            batch,
            labels,
            &self.loss,
            self.shards,
            self.pool.as_ref(),
        )?;
        if !loss.is_finite() {
            return Ok(None);
        }
        self.optimizer.step(&mut self.network.params, &grads)?;
        Ok(Some(loss))
    }
}

fn batch_samples(data: &IdxDataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let samples = idx.iter().map(|&i| data.normalized(i)).collect();
    let labels = idx.iter().map(|&i| data.labels[i] as usize).collect();
    (samples, labels)
}

fn check_dataset(net: &Network<f32>, data: &IdxDataset) -> Result<(), Error> {
    let need: usize = net.spec.input_shape.iter().product();
    if data.pixels_per_image() != need {
        return Err(Error::Config(format!(
            "dataset images have {} pixels, network expects {need}",
            data.pixels_per_image()
        )));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains `network` and evaluates it on `test` (single pass, seeded).
pub fn train(
    network: Network<f32>,
    train_set: &IdxDataset,
    test_set: &IdxDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, Error> {
    check_dataset(&network, train_set)?;
    check_dataset(&network, test_set)?;
    let mut trainer = Trainer::new(network, config)?;
    let spec = trainer.network.spec.clone();
    let n_train = config.train_limit.unwrap_or(usize::MAX).min(train_set.len());
    let test = test_set.head(config.test_limit.unwrap_or(usize::MAX));
    let mut shuffle = rng_for(config.seed, STREAM_SHUFFLE);
    let mut enc_rng = rng_for(config.seed, STREAM_ENCODE);
    let eval_cfg = EvalConfig {
        seed: config.seed,
        ..EvalConfig::default()
    };
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let (samples, labels) = batch_samples(train_set, idx);
            let batch = encode_batch(
                spec.encoding(),
                &samples,
                &spec.input_shape,
                spec.n_steps,
                &mut enc_rng,
            )?;
            match trainer.step(&batch, &labels)? {
                Some(l) => loss_sum += l,
                None => return Err(Error::Diverged { epoch, batch: bi }),
            }
            batches += 1;
        }
        let test_accuracy = if config.eval_every_epoch || epoch == config.epochs {
            Some(evaluate(&trainer.network, &test, &eval_cfg)?.mean)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            test_accuracy,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    let cell = spec.output_cell().copied().unwrap_or_default();
    let mut meta = TrainingMeta {
        epochs: config.epochs,
        beta: cell.beta,
        ratio: cell.ratio,
        n_out: config.loss.n_out,
        seed: config.seed,
        ..Default::default()
    };
    for (k, v) in [
        ("init", "kaiming-uniform".to_string()),
        ("optimizer", format!("{:?}", config.optimizer).to_lowercase()),
        ("lr", config.lr().to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("loss", format!("{:?}", config.loss.kind)),
        ("model", cell.model.to_string()),
        ("n_steps", spec.n_steps.to_string()),
        ("encoding", spec.encoding().name().to_string()),
    ] {
        meta.notes.insert(k.into(), v);
    }
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(trainer.network, meta),
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Spike train length at test time (defaults to the network's).
    pub n_steps: Option<usize>,
    /// Encoding at test time (defaults to the network's).
    pub encoding: Option<EncodingKind>,
    /// Independent encodings averaged for stochastic encoders.
    pub repeats: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_steps: None,
            encoding: None,
            repeats: 1,
            seed: 0,
            batch_size: 500,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

impl EvalResult {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std, runs }
    }
}

/// Resolves the test-time encoding; analog and spike-train encoders are not
/// interchangeable because analog input needs a sensory spiking layer.
pub fn eval_encoding(net: &Network<f32>, requested: Option<EncodingKind>) -> Result<EncodingKind, Error> {
    let trained = net.spec.encoding();
    let kind = requested.unwrap_or(trained);
    let analog = |k: EncodingKind| k == EncodingKind::ConstantAnalog;
    if analog(kind) != analog(trained) {
        return Err(Error::Config(format!(
            "encoding '{}' is incompatible with a network built for '{}'",
            kind.name(),
            trained.name()
        )));
    }
    Ok(kind)
}

/// Predicted classes (argmax of output activity, lowest index on ties).
pub fn predict(net: &Network<f32>, batch: &EncodedBatch<f32>) -> Result<Vec<usize>, Error> {
    let p = net.bind(&Eager);
    let out = net.forward(&Eager, &p, batch, false)?;
    Ok(argmax_rows(&out.activity))
}

/// Classification accuracy in percent.
pub fn evaluate(net: &Network<f32>, data: &IdxDataset, cfg: &EvalConfig) -> Result<EvalResult, Error> {
    check_dataset(net, data)?;
    let kind = eval_encoding(net, cfg.encoding)?;
    let n_steps = cfg.n_steps.unwrap_or(net.spec.n_steps);
    let n = cfg.limit.unwrap_or(usize::MAX).min(data.len());
    if n == 0 {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let repeats = if kind.is_stochastic() { cfg.repeats.max(1) } else { 1 };
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = rng_for(cfg.seed.wrapping_add(r as u64), STREAM_EVAL);
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let (samples, labels) = batch_samples(data, chunk);
            let batch = encode_batch(kind, &samples, &net.spec.input_shape, n_steps, &mut rng)?;
            let pred = predict(net, &batch)?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        runs.push(100.0 * correct as f64 / n as f64);
    }
    Ok(EvalResult::from_runs(runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_preset;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn mse_examples() {
        let t = [0.0, 4.0, 0.0];
        assert_eq!(loss_mse_count(&t, 1, 4).unwrap(), 0.0);
        assert!(close(loss_mse_count(&[0.0; 10], 3, 4).unwrap(), 1.6, 1e-12));
        assert!(loss_mse_count(&[0.0; 10], 10, 4).is_err());
    }

    #[test]
    fn ce_examples() {
        assert!(close(loss_ce_activity(&[1.0; 10], 0).unwrap(), 10f64.ln(), 1e-12));
        let mut a = vec![0.0; 10];
        a[0] = 4.0;
        let expected = -(4f64.exp() / (4f64.exp() + 9.0)).ln();
        assert!(close(loss_ce_activity(&a, 0).unwrap(), expected, 1e-12));
        // Quoted as 0.1521; the exact value is 0.15258.
        assert!(close(expected, 0.1521, 1e-3));
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            a[0] = k as f64;
            let l = loss_ce_activity(&a, 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(loss_ce_activity(&a, 11).is_err());
    }

    #[test]
    fn tape_losses_match_plain() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64, 0.0, 3.0, 2.0, 2.0, 0.0]).unwrap();
        let labels = [2, 0];
        for kind in [LossKind::MseSpikeCount, LossKind::CrossEntropyActivity] {
            let spec = LossSpec { kind, n_out: 4 };
            let tape = Tape::new();
            let v = tape.param(a.clone());
            let l = spec.on_tape(&tape, v, &labels).unwrap().value().item().unwrap();
            let plain = (spec.eval(&a.data()[..3], 2).unwrap() + spec.eval(&a.data()[3..], 0).unwrap()) / 2.0;
            assert!(close(l, plain, 1e-12), "{kind:?}: {l} vs {plain}");
        }
    }

    #[test]
    fn n_out_bounded_by_train_length() {
        let spec = LossSpec {
            kind: LossKind::MseSpikeCount,
            n_out: 9,
        };
        assert!(spec.validate(8).is_err());
        assert!(spec.validate(9).is_ok());
    }

    #[test]
    fn adam_and_sgd_descend_on_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::<f64>::new(kind, kind.default_lr().max(0.01));
            let mut p = vec![Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()];
            for _ in 0..3000 {
                let g = vec![p[0].scale(2.0)];
                opt.step(&mut p, &g).unwrap();
            }
            assert!(p[0].max_abs() < 2e-2, "{kind:?} {:?}", p[0].data());
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 0.01);
        let mut p = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![5.0, -0.1]).unwrap()];
        opt.step(&mut p, &g).unwrap();
        assert!(close(p[0].data()[0], 0.99, 1e-6));
        assert!(close(p[0].data()[1], 1.01, 1e-6));
    }

    #[test]
    fn gradients_nonzero_after_one_batch() {
        let net = Network::init(build_preset("shallow").unwrap(), 0).unwrap();
        let mut rng = rng_for(0, STREAM_ENCODE);
        let samples: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..784).map(|j| ((i * 31 + j) % 17) as f64 / 16.0).collect())
            .collect();
        let batch = encode_batch(EncodingKind::Bernoulli, &samples, &[1, 28, 28], 8, &mut rng).unwrap();
        let labels: Vec<usize> = (0..8).collect();
        let (_, grads) = batch_gradients(&net, &batch, &labels, &LossSpec::default()).unwrap();
        assert!(grads.iter().any(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn sharded_gradients_match_single_pass() {
        let net = Network::init(build_preset("lin-sp-lin-sp").unwrap(), 2).unwrap();
        let mut rng = rng_for(1, STREAM_ENCODE);
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..784).map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0).collect())
            .collect();
        let batch = encode_batch(EncodingKind::Bernoulli, &samples, &[1, 28, 28], 6, &mut rng).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 10).collect();
        let loss = LossSpec::default();
        let (l1, g1) = batch_gradients(&net, &batch, &labels, &loss).unwrap();
        let (l3, g3) = sharded_gradients(&net, &batch, &labels, &loss, 3, None).unwrap();
        assert!(close(l1, l3, 1e-5));
        for (a, b) in g1.iter().zip(&g3) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            lr: Some(-1.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn analog_encoding_needs_sensory_layer() {
        let net = Network::init(build_preset("shallow").unwrap(), 0).unwrap();
        assert!(eval_encoding(&net, Some(EncodingKind::ConstantAnalog)).is_err());
        assert_eq!(
            eval_encoding(&net, Some(EncodingKind::Periodic)).unwrap(),
            EncodingKind::Periodic
        );
    }
}
