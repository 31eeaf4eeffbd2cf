//! Coarse-versus-fine agreement on randomly connected recurrent networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coarse::{CellConstants, CoarseModel};
use crate::error::Error;
use crate::lif::{run, LifNetwork, NeuronParams, Synapse};
use crate::training::rng_for;

const STREAM_NET: u64 = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayMode {
    /// Delay uniform in `(0, τ_r]` per synapse.
    #[default]
    Uniform,
    /// Instantaneous delivery.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomNetSpec {
    pub n_neurons: usize,
    pub density: f64,
    /// Defaults to `v0 / √(density · n)`.
    pub weight_std: Option<f64>,
    pub input_mean: f64,
    /// Defaults to `0.2 · input_mean`.
    pub input_std: Option<f64>,
    pub v0: f64,
    pub delay: DelayMode,
    pub seed: u64,
}

impl Default for RandomNetSpec {
    fn default() -> Self {
        Self {
            n_neurons: 1000,
            density: 0.05,
            weight_std: None,
            input_mean: 1.0,
            input_std: None,
            v0: 1.0,
            delay: DelayMode::Uniform,
            seed: 0,
        }
    }
}

impl RandomNetSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n_neurons < 2 {
            return Err(Error::Config("random network needs at least 2 neurons".into()));
        }
        if !(self.density >= 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside [0, 1]", self.density)));
        }
        if !(self.v0 > 0.0) {
            return Err(Error::Config("threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_std(&self) -> f64 {
        self.weight_std.unwrap_or_else(|| {
            if self.density > 0.0 {
                self.v0 / (self.density * self.n_neurons as f64).sqrt()
            } else {
                0.0
            }
        })
    }

    pub fn input_std(&self) -> f64 {
        self.input_std.unwrap_or(0.2 * self.input_mean.abs())
    }
}

/// Connectivity and drive of one random network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomNet {
    pub u_ext: Vec<f64>,
    /// Outgoing synapses per neuron (delays in units of τ_r).
    pub synapses: Vec<Vec<Synapse>>,
}

impl RandomNet {
    pub fn len(&self) -> usize {
        self.u_ext.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_ext.is_empty()
    }

    pub fn synapse_count(&self) -> usize {
        self.synapses.iter().map(Vec::len).sum()
    }
}

pub fn generate_random_net(spec: &RandomNetSpec) -> Result<RandomNet, Error> {
    spec.validate()?;
    let n = spec.n_neurons;
    let mut rng = rng_for(spec.seed, STREAM_NET);
    let w = Normal::new(0.0, spec.weight_std()).map_err(|e| Error::Config(e.to_string()))?;
    let u = Normal::new(spec.input_mean, spec.input_std()).map_err(|e| Error::Config(e.to_string()))?;
    let u_ext: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
    let mut synapses = vec![Vec::new(); n];
    for (i, out) in synapses.iter_mut().enumerate() {
        for j in 0..n {
            if i != j && rng.gen::<f64>() < spec.density {
                let weight = w.sample(&mut rng);
                let delay = match spec.delay {
                    DelayMode::Uniform => 1.0 - rng.gen::<f64>(),
                    DelayMode::Zero => 0.0,
                };
                out.push(Synapse {
                    target: j,
                    weight,
                    delay,
                });
            }
        }
    }
    Ok(RandomNet { u_ext, synapses })
}

/// Spikes per τ_r of every neuron in `[warmup, duration)` of an exact simulation.
pub fn measure_rates_fine(
    net: &RandomNet,
    ratio: f64,
    v0: f64,
    duration: f64,
    warmup: f64,
) -> Result<Vec<f64>, Error> {
    check_window(duration, warmup)?;
    let params = NeuronParams::from_ratio(ratio, v0)?;
    let lif = LifNetwork {
        params,
        u_ext: net.u_ext.clone(),
        synapses: net.synapses.clone(),
    };
    let record = run(&lif, &[], duration)?;
    Ok(record.rates(net.len(), warmup, duration))
}

/// Spikes per τ_r of every neuron over steps `[warmup, steps)` of a coarse
/// simulation, with recurrent input taken from the previous step.
pub fn measure_rates_coarse(
    net: &RandomNet,
    model: CoarseModel,
    ratio: f64,
    v0: f64,
    steps: usize,
    warmup: usize,
) -> Result<Vec<f64>, Error> {
    check_window(steps as f64, warmup as f64)?;
    let cell = CellConstants::<f64>::new(model, ratio)?;
    let n = net.len();
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut current = vec![0.0; n];
    for step in 0..steps {
        current.copy_from_slice(&net.u_ext);
        for (j, out) in net.synapses.iter().enumerate() {
            if s[j] > 0.0 {
                for syn in out {
                    current[syn.target] += syn.weight;
                }
            }
        }
        for i in 0..n {
            v[i] = cell.update_xi(v[i], s[i], ratio * current[i]);
        }
        for i in 0..n {
            s[i] = if v[i] >= v0 { 1.0 } else { 0.0 };
            if step >= warmup && s[i] > 0.0 {
                counts[i] += 1;
            }
        }
    }
    let window = (steps - warmup) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / window).collect())
}

fn check_window(duration: f64, warmup: f64) -> Result<(), Error> {
    if !(duration > warmup && warmup >= 0.0) {
        return Err(Error::Config(format!(
            "measurement window empty: duration {duration}, warm-up {warmup}"
        )));
    }
    Ok(())
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, Error> {
    if x.len() != y.len() {
        return Err(Error::Degenerate(format!(
            "length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("need at least two observations".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    pub n_neurons: usize,
    pub density: f64,
    pub ratios: Vec<f64>,
    /// Network instances per ratio.
    pub instances: usize,
    /// Range of the mean drive `τ·μ / v0` swept across instances.
    pub drive_min: f64,
    pub drive_max: f64,
    /// Simulated time in units of τ_r.
    pub duration: usize,
    pub warmup_fraction: f64,
    pub v0: f64,
    pub delay: DelayMode,
    pub seed: u64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            n_neurons: 1000,
            density: 0.05,
            ratios: vec![1.0, 2.0, 5.0],
            instances: 20,
            drive_min: 0.5,
            drive_max: 3.0,
            duration: 100,
            warmup_fraction: 0.2,
            v0: 1.0,
            delay: DelayMode::Uniform,
            seed: 0,
        }
    }
}

/// One `(instance, ratio)` row of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub seed: u64,
    pub ratio: f64,
    /// Mean exact-simulation rate, spikes per τ_r per neuron.
    pub mean_activity: f64,
    /// Pearson r of Models I, II, III against the exact rates; `None` when undefined.
    pub r: [Option<f64>; 3],
}

impl CorrelationConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("ratios must be positive and non-empty".into()));
        }
        if self.instances == 0 {
            return Err(Error::Config("need at least one instance".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warm-up fraction must be in [0, 1)".into()));
        }
        if self.duration == 0 || self.drive_min > self.drive_max {
            return Err(Error::Config("invalid duration or drive range".into()));
        }
        RandomNetSpec {
            n_neurons: self.n_neurons,
            density: self.density,
            ..Default::default()
        }
        .validate()
    }

    /// Mean drive of instance `k`, spread evenly over `[drive_min, drive_max]`.
    pub fn drive(&self, k: usize) -> f64 {
        if self.instances == 1 {
            return self.drive_min;
        }
        self.drive_min + (self.drive_max - self.drive_min) * k as f64 / (self.instances - 1) as f64
    }

    pub fn net_spec(&self, ratio: f64, k: usize) -> RandomNetSpec {
        RandomNetSpec {
            n_neurons: self.n_neurons,
            density: self.density,
            weight_std: None,
            input_mean: self.drive(k) * self.v0 / ratio,
            input_std: None,
            v0: self.v0,
            delay: self.delay,
            seed: self.seed.wrapping_add(k as u64),
        }
    }
}

pub fn correlation_instance(cfg: &CorrelationConfig, ratio: f64, k: usize) -> Result<CorrelationRow, Error> {
    let spec = cfg.net_spec(ratio, k);
    let net = generate_random_net(&spec)?;
    let warm = (cfg.duration as f64 * cfg.warmup_fraction).round() as usize;
    let fine = measure_rates_fine(&net, ratio, cfg.v0, cfg.duration as f64, warm as f64)?;
    let mut r = [None; 3];
    for (slot, model) in r.iter_mut().zip(CoarseModel::ALL) {
        let coarse = measure_rates_coarse(&net, model, ratio, cfg.v0, cfg.duration, warm)?;
        *slot = pearson(&fine, &coarse).ok();
    }
    Ok(CorrelationRow {
        seed: spec.seed,
        ratio,
        mean_activity: fine.iter().sum::<f64>() / fine.len() as f64,
        r,
    })
}

/// Runs every `(ratio, instance)` pair. Instances are independent and run in
/// parallel on the current rayon pool; row order is deterministic.
pub fn correlation_experiment(cfg: &CorrelationConfig) -> Result<Vec<CorrelationRow>, Error> {
    use rayon::prelude::*;
    cfg.validate()?;
    let jobs: Vec<(f64, usize)> = cfg
        .ratios
        .iter()
        .flat_map(|&ratio| (0..cfg.instances).map(move |k| (ratio, k)))
        .collect();
    jobs.par_iter()
        .map(|&(ratio, k)| correlation_instance(cfg, ratio, k))
        .collect()
}

/// Mean fine rate (spikes per τ_r) below which a network counts as low-activity.
pub const LOW_ACTIVITY: f64 = 0.3;

/// Median r per model over rows satisfying `keep`.
pub fn median_r(rows: &[CorrelationRow], keep: impl Fn(&CorrelationRow) -> bool) -> [Option<f64>; 3] {
    let mut out = [None; 3];
    for (m, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = rows.iter().filter(|r| keep(r)).filter_map(|r| r.r[m]).collect();
        *slot = median(&vals);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        // sxy = 3, sxx = 2, syy = 42/9
        assert!((r - 3.0 / (2.0f64 * 42.0 / 9.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
        assert!(matches!(pearson(&[1.0, 1.0], &[2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn no_synapses_at_zero_density() {
        let net = generate_random_net(&RandomNetSpec {
            n_neurons: 50,
            density: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(net.synapse_count(), 0);
    }

    #[test]
    fn synapse_count_is_binomial() {
        let net = generate_random_net(&RandomNetSpec::default()).unwrap();
        let trials = 1000.0f64 * 999.0;
        let mean = trials * 0.05;
        let sd = (trials * 0.05 * 0.95).sqrt();
        assert!((net.synapse_count() as f64 - mean).abs() < 3.0 * sd);
        assert!(net
            .synapses
            .iter()
            .enumerate()
            .all(|(i, s)| s.iter().all(|x| x.target != i && x.delay > 0.0 && x.delay <= 1.0)));
    }

    #[test]
    fn same_seed_same_network() {
        let spec = RandomNetSpec {
            n_neurons: 100,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_random_net(&spec).unwrap(), generate_random_net(&spec).unwrap());
    }

    #[test]
    fn subthreshold_isolated_network_is_silent() {
        let net = generate_random_net(&RandomNetSpec {
            n_neurons: 20,
            density: 0.0,
            input_mean: 0.3,
            ..Default::default()
        })
        .unwrap();
        let fine = measure_rates_fine(&net, 2.0, 1.0, 50.0, 10.0).unwrap();
        assert!(fine.iter().all(|&r| r == 0.0));
        for model in CoarseModel::ALL {
            let coarse = measure_rates_coarse(&net, model, 2.0, 1.0, 50, 10).unwrap();
            assert!(coarse.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn isolated_neuron_fine_rate_matches_analytic() {
        let net = RandomNet {
            u_ext: vec![1.0, 1.0],
            synapses: vec![Vec::new(); 2],
        };
        let rates = measure_rates_fine(&net, 2.0, 1.0, 2000.0, 400.0).unwrap();
        let analytic = 1.0 / (2.0 * 2f64.ln() + 1.0);
        assert!((rates[0] - analytic).abs() < 1e-3, "{}", rates[0]);
    }

    #[test]
    fn coarse_rates_bounded_by_refractory_limit() {
        let net = generate_random_net(&RandomNetSpec {
            n_neurons: 200,
            input_mean: 3.0,
            ..Default::default()
        })
        .unwrap();
        for model in CoarseModel::ALL {
            let r = measure_rates_coarse(&net, model, 2.0, 1.0, 100, 20).unwrap();
            assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn pearson_affine_invariance() {
        let x = [0.1, 0.4, 0.35, 0.8, 0.2];
        let y = [0.2, 0.3, 0.5, 0.9, 0.1];
        let r = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((pearson(&x2, &y).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn median_of_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
