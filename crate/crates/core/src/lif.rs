//! Exact event-driven leaky integrate-and-fire simulator.
//!
//! Between events the membrane follows the closed-form solution of
//! `τ dv/dt = -v + τ u_ext`; an incoming spike of weight `w` makes `v` jump by
//! `w`. Threshold crossings caused by a constant suprathreshold drive are
//! scheduled analytically. After a spike the potential is clamped at the reset
//! value for the absolute refractory period `τ_r` and incoming spikes are
//! discarded.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use crate::error::SimError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams {
    pub tau: f64,
    pub tau_r: f64,
    pub v0: f64,
    pub v_reset: f64,
}

impl NeuronParams {
    pub fn new(tau: f64, tau_r: f64, v0: f64) -> Result<Self, SimError> {
        let p = Self {
            tau,
            tau_r,
            v0,
            v_reset: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters in refractory-period time units for a given `τ/τ_r`.
    pub fn from_ratio(ratio: f64, v0: f64) -> Result<Self, SimError> {
        Self::new(ratio, 1.0, v0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SimError::BadParams(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.tau_r > 0.0 && self.tau_r.is_finite()) {
            return Err(SimError::BadParams(format!(
                "tau_r must be positive, got {}",
                self.tau_r
            )));
        }
        if !(self.v0 > self.v_reset) {
            return Err(SimError::BadParams(format!(
                "threshold {} must exceed reset {}",
                self.v0, self.v_reset
            )));
        }
        Ok(())
    }

    /// Analytic firing period under constant drive, if suprathreshold.
    pub fn period(&self, u_ext: f64) -> Option<f64> {
        crossing_time(self.v_reset, u_ext, self).map(|t| t + self.tau_r)
    }
}

/// Exact free evolution over `dt` with constant external current.
pub fn evolve_free(v: f64, u_ext: f64, dt: f64, params: &NeuronParams) -> Result<f64, SimError> {
    if dt < 0.0 || dt.is_nan() {
        return Err(SimError::NegativeStep(dt));
    }
    Ok(free(v, u_ext, dt, params.tau))
}

#[inline]
fn free(v: f64, u_ext: f64, dt: f64, tau: f64) -> f64 {
    let decay = (-dt / tau).exp();
    v * decay + tau * u_ext * -(-dt / tau).exp_m1()
}

/// Time from potential `v` until the constant drive carries it to threshold.
pub fn crossing_time(v: f64, u_ext: f64, params: &NeuronParams) -> Option<f64> {
    let target = params.tau * u_ext;
    if v >= params.v0 {
        return Some(0.0);
    }
    if target <= params.v0 {
        return None;
    }
    Some(params.tau * ((target - v) / (target - params.v0)).ln())
}

/// A spike emitted by `neuron` at `time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spike {
    pub neuron: usize,
    pub time: f64,
}

/// Writes spikes as CSV rows `neuron_id,time` with a header.
pub fn write_spikes_csv<W: Write>(spikes: &[Spike], mut out: W) -> std::io::Result<()> {
    writeln!(out, "neuron_id,time")?;
    for s in spikes {
        writeln!(out, "{},{}", s.neuron, s.time)?;
    }
    Ok(())
}

struct Entry<E> {
    time: f64,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; reverse so the earliest (then oldest) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Time-ordered queue; equal times pop in insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    pub fn push(&mut self, time: f64, payload: E) {
        self.heap.push(Entry {
            time,
            seq: self.seq,
            payload,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        self.heap.pop().map(|e| (e.time, e.payload))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Synapse {
    pub target: usize,
    pub weight: f64,
    /// Axonal delay between emission and delivery.
    pub delay: f64,
}

/// A network of identical LIF neurons with per-neuron constant drive.
#[derive(Clone, Debug)]
pub struct LifNetwork {
    pub params: NeuronParams,
    pub u_ext: Vec<f64>,
    /// Outgoing synapses per source neuron.
    pub synapses: Vec<Vec<Synapse>>,
}

impl LifNetwork {
    pub fn new(params: NeuronParams, u_ext: Vec<f64>) -> Self {
        let n = u_ext.len();
        Self {
            params,
            u_ext,
            synapses: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.u_ext.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_ext.is_empty()
    }

    pub fn connect(&mut self, source: usize, synapse: Synapse) -> Result<(), SimError> {
        let size = self.len();
        for index in [source, synapse.target] {
            if index >= size {
                return Err(SimError::UnknownNeuron { index, size });
            }
        }
        self.synapses[source].push(synapse);
        Ok(())
    }

    pub fn synapse_count(&self) -> usize {
        self.synapses.iter().map(Vec::len).sum()
    }
}

/// Dynamic state of every neuron.
#[derive(Clone, Debug)]
pub struct LifState {
    pub v: Vec<f64>,
    /// Time at which `v` was last brought up to date.
    pub updated_at: Vec<f64>,
    pub refractory_until: Vec<f64>,
    pub u_ext: Vec<f64>,
    /// Bumped whenever the predicted threshold crossing becomes stale.
    version: Vec<u64>,
}

impl LifState {
    pub fn new(u_ext: Vec<f64>) -> Self {
        let n = u_ext.len();
        Self {
            v: vec![0.0; n],
            updated_at: vec![0.0; n],
            refractory_until: vec![f64::NEG_INFINITY; n],
            u_ext,
            version: vec![0; n],
        }
    }

    pub fn is_refractory(&self, neuron: usize, time: f64) -> bool {
        time < self.refractory_until[neuron]
    }

    /// Brings `neuron` up to `time` by exact free evolution.
    fn advance(&mut self, neuron: usize, time: f64, params: &NeuronParams) {
        if self.is_refractory(neuron, time) {
            return;
        }
        let start = self.updated_at[neuron].max(self.refractory_until[neuron]);
        if time > start {
            self.v[neuron] = free(self.v[neuron], self.u_ext[neuron], time - start, params.tau);
        }
        self.updated_at[neuron] = time;
    }

    /// Next analytic threshold crossing of `neuron` given no further input.
    fn next_crossing(&self, neuron: usize, params: &NeuronParams) -> Option<f64> {
        let start = self.updated_at[neuron].max(self.refractory_until[neuron]);
        let v = if self.refractory_until[neuron] > self.updated_at[neuron] {
            params.v_reset
        } else {
            self.v[neuron]
        };
        crossing_time(v, self.u_ext[neuron], params).map(|dt| start + dt)
    }
}

/// Outcome of a single spike delivery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Discarded,
    Integrated,
    Fired,
}

/// Applies one weighted input spike at `time`. If it carries the membrane to
/// threshold the neuron resets and turns refractory; the caller is responsible
/// for propagating the resulting spike.
pub fn deliver_spike(
    state: &mut LifState,
    neuron: usize,
    weight: f64,
    time: f64,
    params: &NeuronParams,
) -> Result<Delivery, SimError> {
    let size = state.v.len();
    if neuron >= size {
        return Err(SimError::UnknownNeuron { index: neuron, size });
    }
    if time < state.updated_at[neuron] {
        return Err(SimError::EventInPast {
            event: time,
            now: state.updated_at[neuron],
        });
    }
    if state.is_refractory(neuron, time) {
        return Ok(Delivery::Discarded);
    }
    state.advance(neuron, time, params);
    state.v[neuron] += weight;
    if state.v[neuron] >= params.v0 {
        fire(state, neuron, time, params);
        Ok(Delivery::Fired)
    } else {
        Ok(Delivery::Integrated)
    }
}

fn fire(state: &mut LifState, neuron: usize, time: f64, params: &NeuronParams) {
    state.v[neuron] = params.v_reset;
    state.updated_at[neuron] = time;
    state.refractory_until[neuron] = time + params.tau_r;
    state.version[neuron] += 1;
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Deliver { target: usize, weight: f64 },
    Crossing { neuron: usize, version: u64 },
}

/// An externally injected spike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputSpike {
    pub time: f64,
    pub target: usize,
    pub weight: f64,
}

/// Simulation result.
#[derive(Clone, Debug, Default)]
pub struct SpikeRecord {
    pub spikes: Vec<Spike>,
    /// `(time, neuron, v)` after each processed event, if requested.
    pub trace: Vec<(f64, usize, f64)>,
}

impl SpikeRecord {
    pub fn counts(&self, n: usize, from: f64, to: f64) -> Vec<usize> {
        let mut c = vec![0; n];
        for s in &self.spikes {
            if s.time >= from && s.time < to {
                c[s.neuron] += 1;
            }
        }
        c
    }

    /// Spikes per unit time in `[from, to)`.
    pub fn rates(&self, n: usize, from: f64, to: f64) -> Vec<f64> {
        let span = to - from;
        self.counts(n, from, to)
            .into_iter()
            .map(|c| c as f64 / span)
            .collect()
    }
}

/// Runs the network over `[0, duration)` with the given external input spikes.
pub fn run(
    network: &LifNetwork,
    inputs: &[InputSpike],
    duration: f64,
) -> Result<SpikeRecord, SimError> {
    run_with(network, inputs, duration, false)
}

/// As [`run`], optionally recording the membrane potential after every event.
pub fn run_with(
    network: &LifNetwork,
    inputs: &[InputSpike],
    duration: f64,
    trace: bool,
) -> Result<SpikeRecord, SimError> {
    if !(duration > 0.0) {
        return Err(SimError::BadDuration(duration));
    }
    network.params.validate()?;
    let params = &network.params;
    let n = network.len();
    let mut state = LifState::new(network.u_ext.clone());
    let mut queue = EventQueue::new();
    let mut record = SpikeRecord::default();

    for inp in inputs {
        if inp.time < 0.0 {
            return Err(SimError::EventInPast {
                event: inp.time,
                now: 0.0,
            });
        }
        if inp.target >= n {
            return Err(SimError::UnknownNeuron {
                index: inp.target,
                size: n,
            });
        }
        queue.push(
            inp.time,
            Event::Deliver {
                target: inp.target,
                weight: inp.weight,
            },
        );
    }
    for i in 0..n {
        if let Some(t) = state.next_crossing(i, params) {
            queue.push(t, Event::Crossing { neuron: i, version: 0 });
        }
    }

    let mut now = 0.0;
    while let Some((t, ev)) = queue.pop() {
        if t >= duration {
            break;
        }
        if t < now {
            return Err(SimError::EventInPast { event: t, now });
        }
        now = t;
        let fired = match ev {
            Event::Crossing { neuron, version } => {
                if version != state.version[neuron] {
                    continue;
                }
                fire(&mut state, neuron, t, params);
                Some(neuron)
            }
            Event::Deliver { target, weight } => {
                match deliver_spike(&mut state, target, weight, t, params)? {
                    Delivery::Discarded => None,
                    Delivery::Fired => Some(target),
                    Delivery::Integrated => {
                        state.version[target] += 1;
                        if let Some(tc) = state.next_crossing(target, params) {
                            queue.push(
                                tc,
                                Event::Crossing {
                                    neuron: target,
                                    version: state.version[target],
                                },
                            );
                        }
                        if trace {
                            record.trace.push((t, target, state.v[target]));
                        }
                        None
                    }
                }
            }
        };
        if let Some(i) = fired {
            record.spikes.push(Spike { neuron: i, time: t });
            if trace {
                record.trace.push((t, i, state.v[i]));
            }
            for syn in &network.synapses[i] {
                queue.push(
                    t + syn.delay,
                    Event::Deliver {
                        target: syn.target,
                        weight: syn.weight,
                    },
                );
            }
            if let Some(tc) = state.next_crossing(i, params) {
                queue.push(
                    tc,
                    Event::Crossing {
                        neuron: i,
                        version: state.version[i],
                    },
                );
            }
        }
    }
    Ok(record)
}

/// Spike times of a single neuron receiving `inputs` (`(time, weight)`, sorted
/// by time) under constant drive `u_ext`, over `[0, duration)`.
///
/// Equivalent to [`run`] on a one-neuron network; used for layer-by-layer
/// simulation of feedforward networks where no queue is needed.
pub fn simulate_neuron(
    params: &NeuronParams,
    u_ext: f64,
    inputs: &[(f64, f64)],
    duration: f64,
) -> Vec<f64> {
    let mut state = LifState::new(vec![u_ext]);
    let mut out = Vec::new();
    let mut pending = inputs.iter().peekable();
    loop {
        let next_input = pending.peek().map(|&&(t, _)| t);
        let crossing = state.next_crossing(0, params);
        let t_next = match (crossing, next_input) {
            (Some(tc), Some(ti)) => tc.min(ti),
            (Some(tc), None) => tc,
            (None, Some(ti)) => ti,
            (None, None) => break,
        };
        if t_next >= duration {
            break;
        }
        // A crossing predicted no later than the next input fires first.
        if crossing.is_some_and(|tc| next_input.map_or(true, |ti| tc <= ti)) {
            let tc = crossing.expect("checked");
            fire(&mut state, 0, tc, params);
            out.push(tc);
            continue;
        }
        let (t, w) = *pending.next().expect("checked");
        if let Ok(Delivery::Fired) = deliver_spike(&mut state, 0, w, t, params) {
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(tau: f64, tau_r: f64) -> NeuronParams {
        NeuronParams::new(tau, tau_r, 1.0).unwrap()
    }

    #[test]
    fn evolve_free_examples() {
        let params = p(2.0, 1.0);
        let v = evolve_free(1.0, 0.0, 2.0, &params).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(evolve_free(0.0, 3.0, 0.0, &params).unwrap(), 0.0);
        let v = evolve_free(0.0, 1.0, 2.0 * 2f64.ln(), &params).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        assert!(evolve_free(0.0, 1.0, -0.1, &params).is_err());
    }

    #[test]
    fn evolve_free_composes() {
        let params = p(2.5, 1.0);
        let a = evolve_free(0.3, 0.7, 0.4, &params).unwrap();
        let b = evolve_free(a, 0.7, 1.1, &params).unwrap();
        let c = evolve_free(0.3, 0.7, 1.5, &params).unwrap();
        assert!((b - c).abs() < 1e-14);
    }

    #[test]
    fn deliver_spike_examples() {
        let params = p(2.0, 1.0);
        let mut st = LifState::new(vec![0.0]);
        assert_eq!(deliver_spike(&mut st, 0, 1.5, 0.0, &params).unwrap(), Delivery::Fired);
        assert_eq!(st.v[0], 0.0);
        assert_eq!(st.refractory_until[0], 1.0);
        // refractory: unchanged
        assert_eq!(
            deliver_spike(&mut st, 0, 0.7, 0.5, &params).unwrap(),
            Delivery::Discarded
        );
        assert_eq!(st.v[0], 0.0);

        let mut st = LifState::new(vec![0.0]);
        assert_eq!(
            deliver_spike(&mut st, 0, 0.5, 0.0, &params).unwrap(),
            Delivery::Integrated
        );
        assert_eq!(st.v[0], 0.5);
        assert!(deliver_spike(&mut st, 3, 0.5, 0.0, &params).is_err());
    }

    #[test]
    fn periodic_firing_matches_analytic_period() {
        let params = p(2.0, 1.0);
        let net = LifNetwork::new(params, vec![1.0]);
        let rec = run(&net, &[], 100.0).unwrap();
        let period = 2.0 * 2f64.ln() + 1.0;
        assert_eq!(params.period(1.0).unwrap(), period);
        for (k, s) in rec.spikes.iter().enumerate() {
            let expected = 2.0 * 2f64.ln() + k as f64 * period;
            assert!((s.time - expected).abs() < 1e-9, "{k}: {} vs {expected}", s.time);
        }
        let rate = rec.spikes.len() as f64 / 100.0;
        assert!((rate - 1.0 / period).abs() < 0.01);
        assert!((1.0 / period - 0.419).abs() < 1e-3);
    }

    #[test]
    fn subthreshold_drive_never_fires() {
        let net = LifNetwork::new(p(2.0, 1.0), vec![0.49, 0.0, 0.5]);
        assert!(run(&net, &[], 1000.0).unwrap().spikes.is_empty());
    }

    #[test]
    fn hand_traced_input_train() {
        // τ=2, τ_r=1, no drive. Inputs 0.6 at t=0, 0.6 at t=1 -> v(1-) = 0.6e^{-1/2} = 0.3639,
        // +0.6 = 0.9639 (no spike); 0.6 at t=1.5 -> 0.9639 e^{-1/4} + 0.6 = 1.3507 -> spike at 1.5;
        // 0.9 at t=2.0 is inside refractory [1.5, 2.5) -> discarded; 0.9 at t=2.5 -> 0.9, no spike.
        let params = p(2.0, 1.0);
        let net = LifNetwork::new(params, vec![0.0]);
        let inputs: Vec<InputSpike> = [(0.0, 0.6), (1.0, 0.6), (1.5, 0.6), (2.0, 0.9), (2.5, 0.9)]
            .iter()
            .map(|&(time, weight)| InputSpike {
                time,
                target: 0,
                weight,
            })
            .collect();
        let rec = run_with(&net, &inputs, 10.0, true).unwrap();
        assert_eq!(rec.spikes, vec![Spike { neuron: 0, time: 1.5 }]);
        let v_at_1 = rec.trace.iter().find(|e| e.0 == 1.0).unwrap().2;
        assert!((v_at_1 - (0.6 * (-0.5f64).exp() + 0.6)).abs() < 1e-12);
        let last = rec.trace.last().unwrap();
        assert_eq!((last.0, last.2), (2.5, 0.9));
        let single: Vec<(f64, f64)> = inputs.iter().map(|i| (i.time, i.weight)).collect();
        assert_eq!(simulate_neuron(&params, 0.0, &single, 10.0), vec![1.5]);
    }

    #[test]
    fn input_in_past_rejected() {
        let net = LifNetwork::new(p(2.0, 1.0), vec![0.0]);
        let bad = [InputSpike {
            time: -1.0,
            target: 0,
            weight: 1.0,
        }];
        assert!(matches!(run(&net, &bad, 5.0), Err(SimError::EventInPast { .. })));
        assert!(run(&net, &[], 0.0).is_err());
    }

    #[test]
    fn queue_breaks_ties_by_insertion() {
        let mut q = EventQueue::new();
        q.push(1.0, 'a');
        q.push(0.5, 'b');
        q.push(1.0, 'c');
        q.push(0.5, 'd');
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|e| e.1)).collect();
        assert_eq!(order, vec!['b', 'd', 'a', 'c']);
    }

    #[test]
    fn strong_input_rate_capped_by_refractory() {
        // weight > v0 on every input; inputs every 0.25 -> one spike per τ_r.
        let params = p(2.0, 1.0);
        let inputs: Vec<(f64, f64)> = (0..40).map(|k| (k as f64 * 0.25, 2.0)).collect();
        let spikes = simulate_neuron(&params, 0.0, &inputs, 10.0);
        assert_eq!(spikes.len(), 10);
        for w in spikes.windows(2) {
            assert!(w[1] - w[0] >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        write_spikes_csv(&[Spike { neuron: 3, time: 0.5 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "neuron_id,time\n3,0.5\n");
    }
}
