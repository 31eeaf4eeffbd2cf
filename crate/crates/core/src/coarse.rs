//! Coarse-scale LIF cells evolving once per refractory period.
//!
//! Time is measured in units of the refractory period, so `ratio = τ/τ_r` is
//! also τ. Per step the drive is `ξ = ratio · current`, where `current` is the
//! external current plus the weighted input spikes (`u_ext + Σ w·s`).
//! With `a = e^{-1/ratio}`:
//!
//! ```text
//! I  : v = (1-s')·[a·v' + (1-a)·ξ] + s'·ξ·(1 - ratio·(1-a))
//! II : v = (1-s')·[a·v' + (1-a)·ξ]
//! III: v = (1-s')·a·v' + (1-a)·ξ
//! s  = H(v - v0)
//! ```
//!
//! where primes denote the previous step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Exec, SurrogateParams};
use crate::error::{Error, TensorError};
use crate::tensor::{heaviside, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoarseModel {
    I,
    II,
    III,
}

impl CoarseModel {
    pub const ALL: [CoarseModel; 3] = [CoarseModel::I, CoarseModel::II, CoarseModel::III];
}

impl std::fmt::Display for CoarseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoarseModel::I => "I",
            CoarseModel::II => "II",
            CoarseModel::III => "III",
        })
    }
}

impl std::str::FromStr for CoarseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(CoarseModel::I),
            "II" | "2" => Ok(CoarseModel::II),
            "III" | "3" => Ok(CoarseModel::III),
            other => Err(Error::Config(format!("unknown coarse model '{other}'"))),
        }
    }
}

/// Mean attenuation `(τ/Δt)(1 - e^{-Δt/τ})` of a spike arriving uniformly within
/// an interval `Δt`, given `ratio = τ/Δt`.
pub fn spike_arrival_factor(ratio: f64) -> Result<f64, Error> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("ratio must be positive, got {ratio}")));
    }
    // -expm1 keeps precision for large ratios.
    Ok(ratio * -(-1.0 / ratio).exp_m1())
}

/// Precomputed per-step constants of a coarse cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellConstants<T> {
    pub model: CoarseModel,
    pub ratio: T,
    /// `a = e^{-1/ratio}`
    pub decay: T,
    /// `1 - a`
    pub gain: T,
    /// `1 - ratio·(1-a)`, the Model I drive gain in the interval after a spike.
    pub fire_gain: T,
}

impl<T: Element> CellConstants<T> {
    pub fn new(model: CoarseModel, ratio: f64) -> Result<Self, Error> {
        let factor = spike_arrival_factor(ratio)?;
        let decay = (-1.0 / ratio).exp();
        Ok(Self {
            model,
            ratio: T::of(ratio),
            decay: T::of(decay),
            gain: T::of(-(-1.0 / ratio).exp_m1()),
            fire_gain: T::of(1.0 - factor),
        })
    }

    /// Membrane update from drive `ξ`.
    #[inline]
    pub fn update_xi(&self, v: T, s: T, xi: T) -> T {
        let one = T::one();
        match self.model {
            CoarseModel::I => {
                (one - s) * (self.decay * v + self.gain * xi) + s * xi * self.fire_gain
            }
            CoarseModel::II => (one - s) * (self.decay * v + self.gain * xi),
            CoarseModel::III => (one - s) * self.decay * v + self.gain * xi,
        }
    }

    /// Elementwise update with `ξ = ratio · current`.
    pub fn update(&self, v_prev: &[T], s_prev: &[T], current: &[T], out: &mut [T]) {
        for (((o, &v), &s), &c) in out.iter_mut().zip(v_prev).zip(s_prev).zip(current) {
            *o = self.update_xi(v, s, self.ratio * c);
        }
    }

    /// Vector-Jacobian product of [`CellConstants::update`].
    #[allow(clippy::too_many_arguments)]
    pub fn update_grad(
        &self,
        v_prev: &[T],
        s_prev: &[T],
        current: &[T],
        g: &[T],
        gv: &mut [T],
        gs: &mut [T],
        gc: &mut [T],
    ) {
        let one = T::one();
        for i in 0..g.len() {
            let (v, s, gi) = (v_prev[i], s_prev[i], g[i]);
            let xi = self.ratio * current[i];
            gv[i] = gi * (one - s) * self.decay;
            let (ds, dxi) = match self.model {
                CoarseModel::I => (
                    -(self.decay * v + self.gain * xi) + self.fire_gain * xi,
                    (one - s) * self.gain + s * self.fire_gain,
                ),
                CoarseModel::II => (
                    -(self.decay * v + self.gain * xi),
                    (one - s) * self.gain,
                ),
                CoarseModel::III => (-self.decay * v, self.gain),
            };
            gs[i] = gi * ds;
            gc[i] = gi * dxi * self.ratio;
        }
    }
}

fn default_v0() -> f64 {
    1.0
}

fn default_ratio() -> f64 {
    2.0
}

fn default_beta() -> f64 {
    3.0
}

/// Configuration of one layer of coarse spiking cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseCellParams {
    pub model: CoarseModel,
    /// τ/τ_r
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_v0")]
    pub v0: f64,
    /// Surrogate steepness β.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Replace the hard spike by σ(β(v - v0)) in the forward pass too.
    #[serde(default)]
    pub relaxed: bool,
}

impl Default for CoarseCellParams {
    fn default() -> Self {
        Self {
            model: CoarseModel::I,
            ratio: default_ratio(),
            v0: default_v0(),
            beta: default_beta(),
            relaxed: false,
        }
    }
}

impl CoarseCellParams {
    pub fn new(model: CoarseModel, ratio: f64) -> Self {
        Self {
            model,
            ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        spike_arrival_factor(self.ratio)?;
        SurrogateParams::new(self.beta)?;
        if !(self.v0 > 0.0 && self.v0.is_finite()) {
            return Err(Error::Config(format!(
                "threshold must exceed the reset potential 0, got {}",
                self.v0
            )));
        }
        Ok(())
    }

    pub fn surrogate(&self) -> SurrogateParams {
        SurrogateParams::new(self.beta).expect("validated beta")
    }

    pub fn constants<T: Element>(&self) -> CellConstants<T> {
        CellConstants::new(self.model, self.ratio).expect("validated ratio")
    }

    /// Post-spike drive gain of Model I: `1 - ratio·(1 - a)`.
    pub fn fire_gain(&self) -> f64 {
        1.0 - spike_arrival_factor(self.ratio).expect("validated ratio")
    }

    /// Drive gain without a preceding spike: `1 - a`.
    pub fn nofire_gain(&self) -> f64 {
        -(-1.0 / self.ratio).exp_m1()
    }

    pub fn cell(&self) -> Result<CoarseCell, Error> {
        CoarseCell::new(*self)
    }
}

/// Membrane potentials and spikes of a population at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub v: Vec<f64>,
    pub s: Vec<f64>,
}

impl CellState {
    pub fn zeros(n: usize) -> Self {
        Self {
            v: vec![0.0; n],
            s: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Binary `[T × N]` spike record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrain {
    n_steps: usize,
    n_neurons: usize,
    bits: Vec<u8>,
}

impl SpikeTrain {
    pub fn zeros(n_steps: usize, n_neurons: usize) -> Self {
        Self {
            n_steps,
            n_neurons,
            bits: vec![0; n_steps * n_neurons],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, TensorError> {
        let n = rows.first().map_or(0, Vec::len);
        let mut t = Self::zeros(rows.len(), n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n || r.iter().any(|&b| b > 1) {
                return Err(TensorError::Invalid(
                    "spike rows must be equal length and binary".into(),
                ));
            }
            t.bits[i * n..(i + 1) * n].copy_from_slice(r);
        }
        Ok(t)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn get(&self, step: usize, neuron: usize) -> bool {
        self.bits[step * self.n_neurons + neuron] == 1
    }

    pub fn set(&mut self, step: usize, neuron: usize, spike: bool) {
        self.bits[step * self.n_neurons + neuron] = spike as u8;
    }

    pub fn step(&self, step: usize) -> &[u8] {
        &self.bits[step * self.n_neurons..(step + 1) * self.n_neurons]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Spike count per neuron.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_neurons];
        for row in self.bits.chunks(self.n_neurons.max(1)) {
            for (ci, &b) in c.iter_mut().zip(row) {
                *ci += b as usize;
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Steps at which `neuron` spiked.
    pub fn spike_steps(&self, neuron: usize) -> Vec<usize> {
        (0..self.n_steps).filter(|&t| self.get(t, neuron)).collect()
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.n_steps, self.n_neurons],
            self.bits.iter().map(|&b| T::of(b as f64)).collect(),
        )
        .expect("consistent dimensions")
    }
}

/// A population of identical coarse cells.
#[derive(Clone, Copy, Debug)]
pub struct CoarseCell {
    params: CoarseCellParams,
    consts: CellConstants<f64>,
}

impl CoarseCell {
    pub fn new(params: CoarseCellParams) -> Result<Self, Error> {
        params.validate()?;
        Ok(Self {
            params,
            consts: params.constants(),
        })
    }

    pub fn params(&self) -> &CoarseCellParams {
        &self.params
    }

    /// Advances every neuron by one interval given its drive `ξ`.
    pub fn step(&self, state: &CellState, xi: &[f64]) -> Result<CellState, Error> {
        if xi.len() != state.len() || state.s.len() != state.v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "coarse step",
                left: vec![state.len()],
                right: vec![xi.len()],
            }
            .into());
        }
        let v: Vec<f64> = state
            .v
            .iter()
            .zip(&state.s)
            .zip(xi)
            .map(|((&v, &s), &x)| self.consts.update_xi(v, s, x))
            .collect();
        let s = v.iter().map(|&v| heaviside(v - self.params.v0)).collect();
        Ok(CellState { v, s })
    }

    /// Iterates [`CoarseCell::step`] over a drive sequence from `initial`.
    pub fn unroll(
        &self,
        xi_sequence: &[Vec<f64>],
        initial: &CellState,
    ) -> Result<(SpikeTrain, Vec<Vec<f64>>), Error> {
        if xi_sequence.is_empty() {
            return Err(Error::Config("unroll needs at least one step".into()));
        }
        let mut train = SpikeTrain::zeros(xi_sequence.len(), initial.len());
        let mut vs = Vec::with_capacity(xi_sequence.len());
        let mut state = initial.clone();
        for (t, xi) in xi_sequence.iter().enumerate() {
            state = self.step(&state, xi)?;
            for (i, &s) in state.s.iter().enumerate() {
                train.set(t, i, s == 1.0);
            }
            vs.push(state.v.clone());
        }
        Ok((train, vs))
    }

    /// Unrolls over per-step input currents on an execution backend (eager or
    /// taped). Returns the spike and potential values per step.
    pub fn unroll_exec<T: Element, E: Exec<T>>(
        &self,
        exec: &E,
        currents: &[E::V],
    ) -> Result<(Vec<E::V>, Vec<E::V>), Error> {
        let first = currents
            .first()
            .ok_or_else(|| Error::Config("unroll needs at least one step".into()))?;
        let shape = exec.shape(first);
        let mut v = exec.constant(Tensor::zeros(&shape));
        let mut s = exec.constant(Tensor::zeros(&shape));
        let mut spikes = Vec::with_capacity(currents.len());
        let mut potentials = Vec::with_capacity(currents.len());
        for c in currents {
            let (nv, ns) = self.step_exec(exec, &v, &s, c)?;
            spikes.push(ns.clone());
            potentials.push(nv.clone());
            v = nv;
            s = ns;
        }
        Ok((spikes, potentials))
    }

    /// One step on an execution backend: returns `(v, s)`.
    pub fn step_exec<T: Element, E: Exec<T>>(
        &self,
        exec: &E,
        v_prev: &E::V,
        s_prev: &E::V,
        current: &E::V,
    ) -> Result<(E::V, E::V), Error> {
        let v = exec.coarse_step(self.params.constants(), v_prev, s_prev, current)?;
        let shifted = exec.add_scalar(&v, T::of(-self.params.v0));
        let s = if self.params.relaxed {
            let z = exec.scale(&shifted, T::of(self.params.beta));
            exec.sigmoid(&z)
        } else {
            exec.hard_soft(&shifted, self.params.surrogate())
        };
        Ok((v, s))
    }
}
