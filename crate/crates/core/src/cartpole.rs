//! Cartpole balancing with a spiking policy trained by the cross-entropy method.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Tape};
use crate::checkpoint::{ModelCheckpoint, TrainingMeta};
use crate::coarse::CoarseCellParams;
use crate::encoding::EncodedBatch;
use crate::error::Error;
use crate::network::{policy_spec, Network};
use crate::tensor::{sigmoid, Tensor};
use crate::training::{rng_for, Optimizer, OptimizerKind};

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const HALF_LENGTH: f64 = 0.5;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const MAX_STEPS: usize = 200;

const STREAM_CEM: u64 = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CartpoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartpoleState {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn out_of_bounds(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }

    /// Scales each component to roughly `[-1, 1]`.
    pub fn normalized(&self) -> [f64; 4] {
        [
            self.x / X_LIMIT,
            self.x_dot / 3.0,
            self.theta / THETA_LIMIT,
            self.theta_dot / 3.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Right => 1,
        }
    }
}

/// One explicit Euler step of the classic cart-pole equations.
pub fn physics_step(s: &CartpoleState, action: Action) -> CartpoleState {
    let force = match action {
        Action::Left => -FORCE,
        Action::Right => FORCE,
    };
    let total = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    CartpoleState {
        x: s.x + DT * s.x_dot,
        x_dot: s.x_dot + DT * x_acc,
        theta: s.theta + DT * s.theta_dot,
        theta_dot: s.theta_dot + DT * theta_acc,
    }
}

#[derive(Clone, Debug)]
pub struct Cartpole {
    pub state: CartpoleState,
    pub steps: usize,
    pub done: bool,
}

impl Cartpole {
    pub fn new(state: CartpoleState) -> Self {
        let done = state.out_of_bounds();
        Self {
            state,
            steps: 0,
            done,
        }
    }

    /// Starts from each component uniform in `[-0.05, 0.05]`.
    pub fn reset<R: Rng>(rng: &mut R) -> Self {
        let mut u = || rng.gen_range(-0.05..0.05);
        Self::new(CartpoleState {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
        })
    }

    /// Applies `action`; returns whether the episode has ended.
    pub fn step(&mut self, action: Action) -> Result<bool, Error> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        self.state = physics_step(&self.state, action);
        self.steps += 1;
        self.done = self.state.out_of_bounds() || self.steps >= MAX_STEPS;
        Ok(self.done)
    }
}

/// `y = σ(α(n_s − N_sp/2))`.
pub fn spike_score(n_s: f64, n_steps: usize, alpha: f64) -> f64 {
    sigmoid(alpha * (n_s - n_steps as f64 / 2.0))
}

/// Normalized action probabilities from two output spike counts.
pub fn action_probs(counts: [f64; 2], n_steps: usize, alpha: f64) -> [f64; 2] {
    let y = counts.map(|c| spike_score(c, n_steps, alpha));
    let total = y[0] + y[1];
    [y[0] / total, y[1] / total]
}

pub fn sample_action<R: Rng>(p_left: f64, rng: &mut R) -> Action {
    if rng.gen::<f64>() < p_left {
        Action::Left
    } else {
        Action::Right
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub hidden: usize,
    pub n_steps: usize,
    pub alpha: f64,
    pub cell: CoarseCellParams,
    pub episodes_per_batch: usize,
    /// Episodes with reward at or above this percentile are elite.
    pub elite_percentile: f64,
    pub max_batches: usize,
    pub target_reward: f64,
    /// Episodes in the moving average compared with the target.
    pub window: usize,
    pub lr: f64,
    /// Gradient steps on the elite set after each batch.
    pub updates_per_batch: usize,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            n_steps: 8,
            alpha: 1.0,
            cell: CoarseCellParams::default(),
            episodes_per_batch: 32,
            elite_percentile: 70.0,
            max_batches: 80,
            target_reward: 195.0,
            window: 100,
            lr: 0.01,
            updates_per_batch: 4,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.cell.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden == 0 || self.n_steps == 0 || self.episodes_per_batch == 0 {
            return bad("hidden width, spike train length and batch size must be positive");
        }
        if !(0.0..=100.0).contains(&self.elite_percentile) {
            return bad("elite percentile must be in [0, 100]");
        }
        if !(self.alpha > 0.0 && self.lr > 0.0) {
            return bad("alpha and learning rate must be positive");
        }
        if self.window == 0 || self.max_batches == 0 {
            return bad("window and batch cap must be positive");
        }
        Ok(())
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Indices of episodes whose reward reaches the percentile threshold.
pub fn select_elites(rewards: &[f64], q: f64) -> Vec<usize> {
    let threshold = percentile(rewards, q);
    (0..rewards.len()).filter(|&i| rewards[i] >= threshold).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub states: Vec<[f64; 4]>,
    pub actions: Vec<Action>,
    pub probs: Vec<f64>,
}

impl Episode {
    pub fn reward(&self) -> f64 {
        self.actions.len() as f64
    }
}

/// Spiking cartpole policy.
pub struct Policy {
    pub network: Network<f32>,
    pub alpha: f64,
}

impl Policy {
    pub fn new(cfg: &CemConfig) -> Result<Self, Error> {
        Ok(Self {
            network: Network::init(policy_spec(cfg.hidden, cfg.n_steps, cfg.cell), cfg.seed)?,
            alpha: cfg.alpha,
        })
    }

    fn input(&self, states: &[[f64; 4]]) -> Result<EncodedBatch<f32>, Error> {
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cartpole state"));
        }
        let data = states.iter().flatten().map(|&v| v as f32).collect();
        Ok(EncodedBatch::Analog {
            current: Tensor::new(vec![states.len(), 4], data)?,
            n_steps: self.network.spec.n_steps,
        })
    }

    /// Output spike counts `n_s` for a batch of normalized states.
    pub fn counts(&self, states: &[[f64; 4]]) -> Result<Vec<[f64; 2]>, Error> {
        let input = self.input(states)?;
        let p = self.network.bind(&Eager);
        let out = self.network.forward(&Eager, &p, &input, false)?;
        Ok(out
            .activity
            .data()
            .chunks(2)
            .map(|c| [c[0] as f64, c[1] as f64])
            .collect())
    }

    /// Action probabilities for a batch of normalized states.
    pub fn probs(&self, states: &[[f64; 4]]) -> Result<Vec<[f64; 2]>, Error> {
        let n = self.network.spec.n_steps;
        Ok(self
            .counts(states)?
            .into_iter()
            .map(|c| action_probs(c, n, self.alpha))
            .collect())
    }

    /// Samples an action for one (raw) state.
    pub fn decide<R: Rng>(&self, state: &CartpoleState, rng: &mut R) -> Result<(Action, f64), Error> {
        let p = self.probs(&[state.normalized()])?[0];
        let a = sample_action(p[0], rng);
        Ok((a, p[a.index()]))
    }

    /// Runs `n` episodes in lockstep.
    pub fn rollout<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Episode>, Error> {
        let mut envs: Vec<Cartpole> = (0..n).map(|_| Cartpole::reset(rng)).collect();
        let mut episodes = vec![Episode::default(); n];
        loop {
            let live: Vec<usize> = (0..n).filter(|&i| !envs[i].done).collect();
            if live.is_empty() {
                break;
            }
            let states: Vec<[f64; 4]> = live.iter().map(|&i| envs[i].state.normalized()).collect();
            let probs = self.probs(&states)?;
            for ((&i, s), p) in live.iter().zip(states).zip(probs) {
                let a = sample_action(p[0], rng);
                episodes[i].states.push(s);
                episodes[i].actions.push(a);
                episodes[i].probs.push(p[a.index()]);
                envs[i].step(a)?;
            }
        }
        Ok(episodes)
    }

    /// Mean normalized-probability negative log likelihood of `actions` and its
    /// gradient step.
    pub fn fit_step(
        &mut self,
        states: &[[f64; 4]],
        actions: &[usize],
        opt: &mut Optimizer<f32>,
    ) -> Result<f64, Error> {
        let input = self.input(states)?;
        let tape = Tape::new();
        let p = self.network.bind(&&tape);
        let out = self.network.forward(&&tape, &p, &input, false)?;
        let half = -(self.network.spec.n_steps as f32) / 2.0;
        let z = tape.scale(tape.add_scalar(out.activity, half), self.alpha as f32);
        let y = tape.sigmoid(z);
        let loss = tape.normalized_nll(y, actions)?;
        let value = loss.value().item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("policy loss"));
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = p.iter().map(|v| v.grad()).collect();
        opt.step(&mut self.network.params, &grads)?;
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemBatch {
    pub batch: usize,
    pub mean_reward: f64,
    pub p70_reward: f64,
    /// Mean reward of the last `window` episodes.
    pub moving_average: f64,
    pub loss: f64,
}

pub struct CemOutcome {
    pub checkpoint: ModelCheckpoint,
    pub curve: Vec<CemBatch>,
    /// Batch (1-based) at which the moving average reached the target.
    pub solved_at: Option<usize>,
}

pub fn cem_train(cfg: &CemConfig, mut on_batch: impl FnMut(&CemBatch)) -> Result<CemOutcome, Error> {
    cfg.validate()?;
    let mut policy = Policy::new(cfg)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr);
    let mut rng = rng_for(cfg.seed, STREAM_CEM);
    let mut history: Vec<f64> = Vec::new();
    let mut curve = Vec::new();
    let mut solved_at = None;
    for b in 1..=cfg.max_batches {
        let episodes = policy.rollout(cfg.episodes_per_batch, &mut rng)?;
        let rewards: Vec<f64> = episodes.iter().map(Episode::reward).collect();
        history.extend(&rewards);
        let start = history.len().saturating_sub(cfg.window);
        let moving = history[start..].iter().sum::<f64>() / (history.len() - start) as f64;
        let p70 = percentile(&rewards, cfg.elite_percentile);
        let elites = select_elites(&rewards, cfg.elite_percentile);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for &e in &elites {
            states.extend_from_slice(&episodes[e].states);
            actions.extend(episodes[e].actions.iter().map(|a| a.index()));
        }
        let mut loss = 0.0;
        let solved = history.len() >= cfg.window && moving >= cfg.target_reward;
        if !solved {
            for _ in 0..cfg.updates_per_batch {
                loss = policy.fit_step(&states, &actions, &mut opt)?;
            }
        }
        let row = CemBatch {
            batch: b,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            p70_reward: p70,
            moving_average: moving,
            loss,
        };
        on_batch(&row);
        curve.push(row);
        if solved {
            solved_at = Some(b);
            break;
        }
    }
    let mut meta = TrainingMeta {
        epochs: curve.len(),
        beta: cfg.cell.beta,
        ratio: cfg.cell.ratio,
        n_out: 0,
        seed: cfg.seed,
        ..Default::default()
    };
    meta.notes.insert("task".into(), "cartpole-cem".into());
    meta.notes.insert("alpha".into(), cfg.alpha.to_string());
    meta.notes.insert("lr".into(), cfg.lr.to_string());
    Ok(CemOutcome {
        checkpoint: ModelCheckpoint::new(policy.network, meta),
        curve,
        solved_at,
    })
}
