use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("negative time step {0}")]
    NegativeStep(f64),
    #[error("unknown neuron index {index} (network has {size})")]
    UnknownNeuron { index: usize, size: usize },
    #[error("event at t={event} scheduled before current time t={now}")]
    EventInPast { event: f64, now: f64 },
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("invalid neuron parameters: {0}")]
    BadParams(String),
    #[error("layer {0} has no fine-scale counterpart")]
    Unsupported(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("input {index} = {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("spike train length must be at least 1")]
    EmptyTrain,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint spec hash {found:08x} does not match expected {expected:08x}")]
    SpecHash { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file (need {needed} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
