//! Input encodings mapping intensities in `[0, 1]` to length-`n_steps` sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::SpikeTrain;
use crate::error::{EncodeError, Error, TensorError};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingKind {
    Bernoulli,
    Periodic,
    SingleSpikeDelay,
    ConstantAnalog,
}

impl EncodingKind {
    pub fn is_stochastic(self) -> bool {
        self == EncodingKind::Bernoulli
    }

    pub fn name(self) -> &'static str {
        match self {
            EncodingKind::Bernoulli => "bernoulli",
            EncodingKind::Periodic => "periodic",
            EncodingKind::SingleSpikeDelay => "single-spike-delay",
            EncodingKind::ConstantAnalog => "constant-analog",
        }
    }
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "poisson" | "random" => Ok(EncodingKind::Bernoulli),
            "periodic" => Ok(EncodingKind::Periodic),
            "delay" | "single-spike-delay" => Ok(EncodingKind::SingleSpikeDelay),
            "analog" | "constant-analog" => Ok(EncodingKind::ConstantAnalog),
            other => Err(Error::Config(format!("unknown encoding '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub kind: EncodingKind,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncodingSpec {
    pub fn new(kind: EncodingKind, n_steps: usize) -> Result<Self, EncodeError> {
        if n_steps == 0 {
            return Err(EncodeError::EmptyTrain);
        }
        Ok(Self {
            kind,
            n_steps,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn check_range(x: &[f64]) -> Result<(), EncodeError> {
    match x
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=1.0).contains(&v))
    {
        Some((index, &value)) => Err(EncodeError::OutOfRange { index, value }),
        None => Ok(()),
    }
}

fn check_steps(spec: &EncodingSpec) -> Result<(), EncodeError> {
    if spec.n_steps == 0 {
        Err(EncodeError::EmptyTrain)
    } else {
        Ok(())
    }
}

/// Independent Bernoulli bits with success probability `x_i`.
pub fn encode_bernoulli(x: &[f64], spec: &EncodingSpec) -> Result<SpikeTrain, EncodeError> {
    check_range(x)?;
    check_steps(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = SpikeTrain::zeros(spec.n_steps, x.len());
    for t in 0..spec.n_steps {
        for (i, &p) in x.iter().enumerate() {
            train.set(t, i, rng.gen::<f64>() < p);
        }
    }
    Ok(train)
}

/// Period of the periodic code for intensity `x > 0`.
pub fn periodic_period(x: f64) -> usize {
    ((1.0 / x).floor() as usize).max(1)
}

#[inline]
fn periodic_bit(x: f64, t: usize) -> bool {
    x > 0.0 && (t + 1) % periodic_period(x) == 0
}

/// Spikes every `p = max(1, ⌊1/x⌋)` steps, the first at step `p - 1`.
pub fn encode_periodic(x: &[f64], spec: &EncodingSpec) -> Result<SpikeTrain, EncodeError> {
    check_range(x)?;
    check_steps(spec)?;
    let mut train = SpikeTrain::zeros(spec.n_steps, x.len());
    for t in 0..spec.n_steps {
        for (i, &v) in x.iter().enumerate() {
            train.set(t, i, periodic_bit(v, t));
        }
    }
    Ok(train)
}

/// Step of the single spike for intensity `x > 0`.
pub fn delay_step(x: f64, n_steps: usize) -> usize {
    ((1.0 - x) * (n_steps - 1) as f64).round() as usize
}

/// A single spike at step `round((1 - x)(n_steps - 1))`; none for `x = 0`.
pub fn encode_delay(x: &[f64], spec: &EncodingSpec) -> Result<SpikeTrain, EncodeError> {
    check_range(x)?;
    check_steps(spec)?;
    let mut train = SpikeTrain::zeros(spec.n_steps, x.len());
    for (i, &v) in x.iter().enumerate() {
        if v > 0.0 {
            train.set(delay_step(v, spec.n_steps), i, true);
        }
    }
    Ok(train)
}

/// Constant external current `u_ext = x` repeated for every step.
pub fn encode_analog(x: &[f64], spec: &EncodingSpec) -> Vec<Vec<f64>> {
    vec![x.to_vec(); spec.n_steps.max(1)]
}

pub fn normalize_pixels(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// Per-step network inputs for a batch.
#[derive(Clone, Debug)]
pub enum EncodedBatch<T: Element> {
    /// One binary tensor per step.
    Spikes(Vec<Tensor<T>>),
    /// A constant external current, applied at every one of `n_steps` steps.
    Analog { current: Tensor<T>, n_steps: usize },
}

impl<T: Element> EncodedBatch<T> {
    pub fn n_steps(&self) -> usize {
        match self {
            EncodedBatch::Spikes(s) => s.len(),
            EncodedBatch::Analog { n_steps, .. } => *n_steps,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            EncodedBatch::Spikes(s) => s.first().map_or(0, |t| t.rows()),
            EncodedBatch::Analog { current, .. } => current.rows(),
        }
    }

    /// Samples `start..end` of the batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        Ok(match self {
            EncodedBatch::Spikes(s) => EncodedBatch::Spikes(
                s.iter()
                    .map(|t| t.slice_rows(start, end))
                    .collect::<Result<_, _>>()?,
            ),
            EncodedBatch::Analog { current, n_steps } => EncodedBatch::Analog {
                current: current.slice_rows(start, end)?,
                n_steps: *n_steps,
            },
        })
    }
}

/// Encodes a batch of normalized samples (`[B × features]` with feature shape
/// `feature_shape`) into per-step tensors of shape `[B, feature_shape...]`.
///
/// Bernoulli bits are drawn step-major from `rng`, so the result depends only
/// on the batch contents and the generator state.
pub fn encode_batch<T: Element, R: Rng>(
    kind: EncodingKind,
    samples: &[Vec<f64>],
    feature_shape: &[usize],
    n_steps: usize,
    rng: &mut R,
) -> Result<EncodedBatch<T>, EncodeError> {
    if n_steps == 0 {
        return Err(EncodeError::EmptyTrain);
    }
    let b = samples.len();
    let mut shape = vec![b];
    shape.extend_from_slice(feature_shape);
    let n: usize = feature_shape.iter().product();
    if kind == EncodingKind::ConstantAnalog {
        let data: Vec<T> = samples.iter().flatten().map(|&v| T::of(v)).collect();
        let current = Tensor::new(shape, data).map_err(|_| EncodeError::OutOfRange {
            index: 0,
            value: f64::NAN,
        })?;
        return Ok(EncodedBatch::Analog { current, n_steps });
    }
    for s in samples {
        check_range(s)?;
    }
    let mut steps = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let mut data = Vec::with_capacity(b * n);
        for s in samples {
            for &v in s {
                let bit = match kind {
                    EncodingKind::Bernoulli => rng.gen::<f64>() < v,
                    EncodingKind::Periodic => periodic_bit(v, t),
                    EncodingKind::SingleSpikeDelay => v > 0.0 && delay_step(v, n_steps) == t,
                    EncodingKind::ConstantAnalog => unreachable!(),
                };
                data.push(if bit { T::one() } else { T::zero() });
            }
        }
        steps.push(Tensor::new(shape.clone(), data).expect("consistent shape"));
    }
    Ok(EncodedBatch::Spikes(steps))
}
