//! Runs coarse-trained weights on exact LIF neurons.
//!
//! The feedforward stack is simulated layer by layer: a spike emitted by a
//! presynaptic neuron at time `t` reaches every postsynaptic neuron at `t`
//! with a jump equal to the synaptic weight, biases act as constant external
//! drive, and input spikes of step `n` arrive within `[n·τ_r, (n+1)·τ_r)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::IdxDataset;
use crate::encoding::{encode_batch, EncodedBatch};
use crate::error::{Error, SimError};
use crate::lif::{simulate_neuron, NeuronParams};
use crate::network::{argmax_rows, Layer, Network};
use crate::tensor::{conv2d, matmul, Tensor};
use crate::training::{eval_encoding, predict, rng_for};

const STREAM_TRANSFER: u64 = 4;

/// Where inside its interval an input spike of step `n` is placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputTiming {
    /// Uniformly at random in `[n, n+1)`, the coarse models' arrival assumption.
    #[default]
    Uniform,
    /// Exactly at `n`.
    IntervalStart,
}

impl std::str::FromStr for InputTiming {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "uniform" => Ok(InputTiming::Uniform),
            "start" | "interval-start" => Ok(InputTiming::IntervalStart),
            other => Err(Error::Config(format!("unknown input timing '{other}'"))),
        }
    }
}

/// Values flowing between layers for one sample.
enum Flow {
    /// Constant currents (analog input or linear maps of it).
    Analog(Vec<f64>),
    /// Spike times per neuron.
    Spikes(Vec<Vec<f64>>),
    /// Weighted input events and constant drive per neuron.
    Drive {
        u: Vec<f64>,
        events: Vec<Vec<(f64, f64)>>,
    },
}

fn dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        [n] => (*n, 1, 1),
        _ => (shape.iter().product(), 1, 1),
    }
}

fn sort_events(events: &mut [Vec<(f64, f64)>]) {
    for e in events {
        e.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
}

/// Output spike times of every output neuron for sample `index` of `batch`.
pub fn fine_output_spikes<R: Rng>(
    net: &Network<f64>,
    batch: &EncodedBatch<f64>,
    index: usize,
    timing: InputTiming,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, Error> {
    let shapes = net.spec.shapes()?;
    let n_steps = batch.n_steps();
    let duration = n_steps as f64;
    let features: usize = net.spec.input_shape.iter().product();
    let mut flow = match batch {
        EncodedBatch::Analog { current, .. } => {
            Flow::Analog(current.data()[index * features..(index + 1) * features].to_vec())
        }
        EncodedBatch::Spikes(steps) => {
            let mut times = vec![Vec::new(); features];
            for (n, step) in steps.iter().enumerate() {
                let row = &step.data()[index * features..(index + 1) * features];
                for (i, &bit) in row.iter().enumerate() {
                    if bit > 0.5 {
                        let offset = match timing {
                            InputTiming::Uniform => rng.gen::<f64>(),
                            InputTiming::IntervalStart => 0.0,
                        };
                        times[i].push(n as f64 + offset);
                    }
                }
            }
            Flow::Spikes(times)
        }
    };
    let mut in_shape = net.spec.input_shape.clone();
    let mut p = 0;
    for (li, layer) in net.spec.layers.iter().enumerate().skip(1) {
        let out_shape = &shapes[li - 1];
        flow = match (layer, flow) {
            (Layer::Dense { inputs, outputs, bias }, flow) => {
                let w = &net.params[p];
                let b = bias.then(|| net.params[p + 1].data().to_vec());
                p += 1 + *bias as usize;
                let b = b.unwrap_or_else(|| vec![0.0; *outputs]);
                match flow {
                    Flow::Analog(x) => {
                        let x = Tensor::new(vec![1, *inputs], x)?;
                        let y = matmul(&x, w)?;
                        Flow::Analog(y.data().iter().zip(&b).map(|(a, c)| a + c).collect())
                    }
                    Flow::Spikes(times) => {
                        let mut events = vec![Vec::new(); *outputs];
                        for (i, ts) in times.iter().enumerate() {
                            let row = &w.data()[i * outputs..(i + 1) * outputs];
                            for &t in ts {
                                for (j, &wij) in row.iter().enumerate() {
                                    events[j].push((t, wij));
                                }
                            }
                        }
                        sort_events(&mut events);
                        Flow::Drive { u: b, events }
                    }
                    Flow::Drive { .. } => {
                        return Err(SimError::Unsupported("two stacked linear layers".into()).into())
                    }
                }
            }
            (
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    bias,
                },
                flow,
            ) => {
                let k = &net.params[p];
                let b = bias.then(|| net.params[p + 1].clone());
                p += 1 + *bias as usize;
                let (_, h, w) = dims(&in_shape);
                let (_, oh, ow) = dims(out_shape);
                let bias_of = |o: usize| b.as_ref().map_or(0.0, |b| b.data()[o]);
                match flow {
                    Flow::Analog(x) => {
                        let x = Tensor::new(vec![1, *in_ch, h, w], x)?;
                        let y = conv2d(&x, k, b.as_ref(), *stride, *padding)?.output;
                        Flow::Analog(y.into_data())
                    }
                    Flow::Spikes(times) => {
                        let mut events = vec![Vec::new(); out_ch * oh * ow];
                        let mut u = vec![0.0; out_ch * oh * ow];
                        for o in 0..*out_ch {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let j = (o * oh + oy) * ow + ox;
                                    u[j] = bias_of(o);
                                    for c in 0..*in_ch {
                                        for ky in 0..*kernel {
                                            let iy = (oy * stride + ky) as isize - *padding as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..*kernel {
                                                let ix = (ox * stride + kx) as isize - *padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let src = (c * h + iy as usize) * w + ix as usize;
                                                let wk = k.data()[((o * in_ch + c) * kernel + ky) * kernel + kx];
                                                for &t in &times[src] {
                                                    events[j].push((t, wk));
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        sort_events(&mut events);
                        Flow::Drive { u, events }
                    }
                    Flow::Drive { .. } => {
                        return Err(SimError::Unsupported("two stacked linear layers".into()).into())
                    }
                }
            }
            (Layer::MaxPool { kernel, stride }, Flow::Spikes(times)) => {
                let (c, h, w) = dims(&in_shape);
                let (_, oh, ow) = dims(out_shape);
                let mut out = vec![Vec::new(); c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            // Earliest pooled spike within every interval.
                            let mut first = vec![f64::INFINITY; n_steps];
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let src = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                    for &t in &times[src] {
                                        let n = (t.floor() as usize).min(n_steps - 1);
                                        first[n] = first[n].min(t);
                                    }
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] =
                                first.into_iter().filter(|t| t.is_finite()).collect();
                        }
                    }
                }
                Flow::Spikes(out)
            }
            (Layer::MaxPool { .. }, _) => {
                return Err(SimError::Unsupported("maxpool on non-spiking values".into()).into())
            }
            (Layer::Spiking { cell }, flow) => {
                let params = NeuronParams::from_ratio(cell.ratio, cell.v0)?;
                match flow {
                    Flow::Analog(u) => Flow::Spikes(
                        u.iter()
                            .map(|&u| simulate_neuron(&params, u, &[], duration))
                            .collect(),
                    ),
                    Flow::Drive { u, events } => Flow::Spikes(
                        u.iter()
                            .zip(&events)
                            .map(|(&u, ev)| simulate_neuron(&params, u, ev, duration))
                            .collect(),
                    ),
                    Flow::Spikes(_) => {
                        return Err(SimError::Unsupported(
                            "spiking layer fed directly by spikes".into(),
                        )
                        .into())
                    }
                }
            }
            (Layer::Encoder { .. }, _) => unreachable!("validated"),
        };
        in_shape = out_shape.clone();
    }
    match flow {
        Flow::Spikes(s) => Ok(s),
        _ => Err(SimError::Unsupported("network does not end in spikes".into()).into()),
    }
}

/// Output spike counts per sample, `[B × classes]`.
pub fn fine_activity<R: Rng>(
    net: &Network<f64>,
    batch: &EncodedBatch<f64>,
    timing: InputTiming,
    rng: &mut R,
) -> Result<Tensor<f64>, Error> {
    let b = batch.batch();
    let mut data = Vec::new();
    let mut classes = 0;
    for i in 0..b {
        let spikes = fine_output_spikes(net, batch, i, timing, rng)?;
        classes = spikes.len();
        data.extend(spikes.iter().map(|s| s.len() as f64));
    }
    Ok(Tensor::new(vec![b, classes], data)?)
}

fn cast_batch(batch: &EncodedBatch<f32>) -> EncodedBatch<f64> {
    match batch {
        EncodedBatch::Spikes(s) => EncodedBatch::Spikes(s.iter().map(Tensor::cast).collect()),
        EncodedBatch::Analog { current, n_steps } => EncodedBatch::Analog {
            current: current.cast(),
            n_steps: *n_steps,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub seed: u64,
    pub limit: Option<usize>,
    pub n_steps: Option<usize>,
    pub timing: InputTiming,
    pub batch_size: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            limit: None,
            n_steps: None,
            timing: InputTiming::Uniform,
            batch_size: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub samples: usize,
    pub coarse_accuracy: f64,
    pub fine_accuracy: f64,
    /// Fraction of samples (in percent) where both scales predict the same class.
    pub agreement: f64,
}

impl TransferResult {
    pub fn gap(&self) -> f64 {
        (self.coarse_accuracy - self.fine_accuracy).abs()
    }
}

/// Classifies the same encoded inputs under the coarse model and on exact
/// LIF neurons.
pub fn transfer_evaluate(
    net: &Network<f32>,
    data: &IdxDataset,
    cfg: &TransferConfig,
) -> Result<TransferResult, Error> {
    let kind = eval_encoding(net, None)?;
    let n_steps = cfg.n_steps.unwrap_or(net.spec.n_steps);
    let n = cfg.limit.unwrap_or(usize::MAX).min(data.len());
    if n == 0 {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let fine_net = net.cast::<f64>();
    let mut enc_rng = rng_for(cfg.seed, STREAM_TRANSFER);
    let mut jitter = rng_for(cfg.seed.wrapping_add(1), STREAM_TRANSFER);
    let (mut coarse_ok, mut fine_ok, mut agree) = (0, 0, 0);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let samples: Vec<Vec<f64>> = chunk.iter().map(|&i| data.normalized(i)).collect();
        let batch = encode_batch(kind, &samples, &net.spec.input_shape, n_steps, &mut enc_rng)?;
        let coarse = predict(net, &batch)?;
        let fine = argmax_rows(&fine_activity(&fine_net, &cast_batch(&batch), cfg.timing, &mut jitter)?);
        for ((&i, c), f) in chunk.iter().zip(&coarse).zip(&fine) {
            let label = data.labels[i] as usize;
            coarse_ok += (*c == label) as usize;
            fine_ok += (*f == label) as usize;
            agree += (c == f) as usize;
        }
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(TransferResult {
        samples: n,
        coarse_accuracy: pct(coarse_ok),
        fine_accuracy: pct(fine_ok),
        agreement: pct(agree),
    })
}
