//! Coarse-scale recurrent representations of leaky integrate-and-fire neurons.
//!
//! The crate provides a small tensor/autodiff core, the three coarse cell
//! models, an exact event-driven LIF simulator used as the fine-scale
//! reference, input encoders, network construction and training, the
//! coarse-vs-fine validation experiment, and a cartpole policy trained with
//! the cross-entropy method.

pub mod autodiff;
pub mod cartpole;
pub mod checkpoint;
pub mod coarse;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod lif;
pub mod network;
pub mod sweeps;
pub mod tensor;
pub mod training;
pub mod transfer;
pub mod validation;

pub use error::{Error, Result};
