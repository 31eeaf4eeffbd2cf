//! Declarative layer stacks, presets, and the stepwise forward pass.
//!
//! At every step each layer consumes the previous layer's output for the same
//! step; spiking layers carry their `(v, s)` state from one step to the next.
//! The forward pass is written against [`Exec`] so the same code runs eagerly
//! for evaluation and on a tape for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Exec;
use crate::coarse::{CoarseCell, CoarseCellParams, CoarseModel};
use crate::encoding::{EncodedBatch, EncodingKind};
use crate::error::{Error, TensorError};
use crate::tensor::{conv_output_hw, Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Layer {
    /// How raw inputs enter the network; always the first layer.
    Encoder { encoding: EncodingKind },
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    MaxPool { kernel: usize, stride: usize },
    Spiking { cell: CoarseCellParams },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape `[C, H, W]` (or `[N]` for flat inputs).
    pub input_shape: Vec<usize>,
    pub n_steps: usize,
    pub layers: Vec<Layer>,
}

pub const PRESETS: [&str; 5] = [
    "shallow",
    "lin-sp-lin-sp",
    "conv-sp-lin-sp",
    "conv-sp-conv-sp-lin-sp",
    "lenet5-spiking",
];

/// Knobs shared by all presets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PresetOptions {
    pub cell: CoarseCellParams,
    pub n_steps: usize,
    pub encoding: EncodingKind,
    /// Bias on the dense layers of LeNet5.
    pub dense_bias: bool,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            cell: CoarseCellParams::default(),
            n_steps: 8,
            encoding: EncodingKind::Bernoulli,
            dense_bias: true,
        }
    }
}

pub fn build_preset(name: &str) -> Result<NetworkSpec, Error> {
    build_preset_with(name, &PresetOptions::default())
}

pub fn build_preset_with(name: &str, opts: &PresetOptions) -> Result<NetworkSpec, Error> {
    let sp = || Layer::Spiking { cell: opts.cell };
    let dense = |inputs, outputs, bias| Layer::Dense {
        inputs,
        outputs,
        bias,
    };
    let conv = |in_ch, out_ch, stride, padding| Layer::Conv2d {
        in_ch,
        out_ch,
        kernel: 5,
        stride,
        padding,
        bias: true,
    };
    let pool = || Layer::MaxPool {
        kernel: 2,
        stride: 2,
    };
    let body = match name {
        "shallow" => vec![dense(784, 10, false), sp()],
        "lin-sp-lin-sp" => vec![dense(784, 30, true), sp(), dense(30, 10, false), sp()],
        "conv-sp-lin-sp" => vec![conv(1, 4, 2, 2), sp(), dense(784, 10, false), sp()],
        "conv-sp-conv-sp-lin-sp" => vec![
            conv(1, 4, 2, 2),
            sp(),
            conv(4, 6, 1, 0),
            sp(),
            dense(600, 10, false),
            sp(),
        ],
        // 28x28 input with padding 2 is the classic 32x32 LeNet input.
        "lenet5-spiking" => vec![
            conv(1, 6, 1, 2),
            sp(),
            pool(),
            conv(6, 16, 1, 0),
            sp(),
            pool(),
            dense(400, 120, opts.dense_bias),
            sp(),
            dense(120, 84, opts.dense_bias),
            sp(),
            dense(84, 10, opts.dense_bias),
            sp(),
        ],
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    let mut layers = vec![Layer::Encoder {
        encoding: opts.encoding,
    }];
    if opts.encoding == EncodingKind::ConstantAnalog {
        // Sensory layer turning pixel intensities into spike trains.
        layers.push(sp());
    }
    layers.extend(body);
    let spec = NetworkSpec {
        name: name.to_string(),
        input_shape: vec![1, 28, 28],
        n_steps: opts.n_steps,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Cartpole policy: analog state → dense → spiking hidden → dense → 2 spiking outputs.
pub fn policy_spec(hidden: usize, n_steps: usize, cell: CoarseCellParams) -> NetworkSpec {
    NetworkSpec {
        name: "cartpole-policy".into(),
        input_shape: vec![4],
        n_steps,
        layers: vec![
            Layer::Encoder {
                encoding: EncodingKind::ConstantAnalog,
            },
            Layer::Dense {
                inputs: 4,
                outputs: hidden,
                bias: true,
            },
            Layer::Spiking { cell },
            Layer::Dense {
                inputs: hidden,
                outputs: 2,
                bias: true,
            },
            Layer::Spiking { cell },
        ],
    }
}

impl NetworkSpec {
    /// Checks layer composition and returns the per-layer output shapes
    /// (per sample, excluding the encoder).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, Error> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        let Some(Layer::Encoder { .. }) = self.layers.first() else {
            return Err(Error::Config("first layer must be an encoder".into()));
        };
        if !matches!(self.layers.last(), Some(Layer::Spiking { .. })) {
            return Err(Error::Config("last layer must be a spiking layer".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let bad = |msg: String| Error::Config(format!("layer {i}: {msg}"));
            shape = match layer {
                Layer::Encoder { .. } => return Err(bad("encoder must come first".into())),
                Layer::Dense { inputs, outputs, .. } => {
                    let n: usize = shape.iter().product();
                    if n != *inputs {
                        return Err(bad(format!("dense expects {inputs} inputs, got {n}")));
                    }
                    vec![*outputs]
                }
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(format!("conv needs [C,H,W], got {shape:?}")));
                    };
                    if c != *in_ch {
                        return Err(bad(format!("conv expects {in_ch} channels, got {c}")));
                    }
                    let (oh, ow) = conv_output_hw(h, w, *kernel, *stride, *padding)
                        .map_err(|e| bad(e.to_string()))?;
                    vec![*out_ch, oh, ow]
                }
                Layer::MaxPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(format!("maxpool needs [C,H,W], got {shape:?}")));
                    };
                    if *kernel == 0 || *stride == 0 || *kernel > h || *kernel > w {
                        return Err(bad("invalid maxpool window".into()));
                    }
                    vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                Layer::Spiking { cell } => {
                    cell.validate().map_err(|e| bad(e.to_string()))?;
                    shape
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.shapes().map(|_| ())
    }

    pub fn encoding(&self) -> EncodingKind {
        match self.layers.first() {
            Some(Layer::Encoder { encoding }) => *encoding,
            _ => EncodingKind::Bernoulli,
        }
    }

    pub fn n_outputs(&self) -> Result<usize, Error> {
        Ok(self
            .shapes()?
            .last()
            .map(|s| s.iter().product())
            .unwrap_or(0))
    }

    /// Cell parameters of the output layer.
    pub fn output_cell(&self) -> Option<&CoarseCellParams> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Spiking { cell } => Some(cell),
            _ => None,
        })
    }

    /// Applies `f` to the parameters of every spiking layer.
    pub fn map_cells(&mut self, mut f: impl FnMut(&mut CoarseCellParams)) {
        for l in &mut self.layers {
            if let Layer::Spiking { cell } = l {
                f(cell);
            }
        }
    }

    pub fn set_model(&mut self, model: CoarseModel) {
        self.map_cells(|c| c.model = model);
    }

    /// Shapes of every trainable tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense {
                    inputs,
                    outputs,
                    bias,
                } => {
                    out.push(vec![*inputs, *outputs]);
                    if *bias {
                        out.push(vec![*outputs]);
                    }
                }
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    ..
                } => {
                    out.push(vec![*out_ch, *in_ch, *kernel, *kernel]);
                    if *bias {
                        out.push(vec![*out_ch]);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// Weight init gain (the ReLU Kaiming gain); keeps deep spiking stacks active at init.
pub const DEFAULT_INIT_GAIN: f64 = std::f64::consts::SQRT_2;

/// A network spec together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element = f32> {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor<T>>,
}

/// Result of a forward pass.
pub struct ForwardOutput<V> {
    /// Per-output-neuron spike counts `[B × classes]`.
    pub activity: V,
    /// Output-layer spikes per step.
    pub output_spikes: Vec<V>,
    /// Spikes of every spiking layer per step (`[layer][step]`), if requested.
    pub layer_spikes: Vec<Vec<V>>,
}

impl<T: Element> Network<T> {
    /// Kaiming-uniform initialization: weights in `±√(6/fan_in)`, biases in
    /// `±1/√fan_in`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self, Error> {
        Self::init_with_gain(spec, seed, DEFAULT_INIT_GAIN)
    }

    /// Weights uniform with standard deviation `gain/√fan_in`; biases in `±1/√fan_in`.
    pub fn init_with_gain(spec: NetworkSpec, seed: u64, gain: f64) -> Result<Self, Error> {
        spec.validate()?;
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!("init gain must be positive, got {gain}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in &spec.layers {
            let (fan_in, shapes) = match l {
                Layer::Dense { inputs, outputs, bias } => {
                    let mut s = vec![vec![*inputs, *outputs]];
                    if *bias {
                        s.push(vec![*outputs]);
                    }
                    (*inputs, s)
                }
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    ..
                } => {
                    let mut s = vec![vec![*out_ch, *in_ch, *kernel, *kernel]];
                    if *bias {
                        s.push(vec![*out_ch]);
                    }
                    (in_ch * kernel * kernel, s)
                }
                _ => continue,
            };
            let bias_bound = 1.0 / (fan_in as f64).sqrt();
            for (k, shape) in shapes.into_iter().enumerate() {
                let bound = if k == 0 {
                    gain * (3.0 / fan_in as f64).sqrt()
                } else {
                    bias_bound
                };
                params.push(Tensor::from_fn(&shape, |_| {
                    T::of(rng.gen_range(-bound..bound))
                }));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self, Error> {
        spec.validate()?;
        let params = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self, Error> {
        spec.validate()?;
        let expected = spec.param_shapes();
        let found: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != found {
            return Err(Error::Config(format!(
                "parameter shapes {found:?} do not match spec {expected:?}"
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter with the backend.
    pub fn bind<E: Exec<T>>(&self, exec: &E) -> Vec<E::V> {
        self.params.iter().map(|p| exec.param(p)).collect()
    }

    /// Runs the network over all steps of `input`.
    pub fn forward<E: Exec<T>>(
        &self,
        exec: &E,
        params: &[E::V],
        input: &EncodedBatch<T>,
        record: bool,
    ) -> Result<ForwardOutput<E::V>, Error> {
        let shapes = self.spec.shapes()?;
        let batch = input.batch();
        let expected: usize = self.spec.input_shape.iter().product();
        let given: Vec<usize> = match input {
            EncodedBatch::Spikes(s) => s.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
            EncodedBatch::Analog { current, .. } => current.shape().to_vec(),
        };
        if given.iter().skip(1).product::<usize>() != expected || given.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "network input",
                left: given,
                right: self.spec.input_shape.clone(),
            }
            .into());
        }
        let with_batch = |s: &[usize]| {
            let mut v = vec![batch];
            v.extend_from_slice(s);
            v
        };
        let cells: Vec<Option<CoarseCell>> = self
            .spec
            .layers
            .iter()
            .map(|l| match l {
                Layer::Spiking { cell } => CoarseCell::new(*cell).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_, _>>()?;
        let mut states: Vec<Option<(E::V, E::V)>> = vec![None; self.spec.layers.len()];
        let mut layer_spikes: Vec<Vec<E::V>> = Vec::new();
        let analog = match input {
            EncodedBatch::Analog { current, .. } => Some(exec.constant(current.clone())),
            EncodedBatch::Spikes(_) => None,
        };
        let mut outputs = Vec::with_capacity(input.n_steps());
        for t in 0..input.n_steps() {
            let mut flow = match (input, &analog) {
                (EncodedBatch::Spikes(steps), _) => exec.constant(steps[t].clone()),
                (_, Some(a)) => a.clone(),
                _ => unreachable!(),
            };
            let mut in_shape = self.spec.input_shape.clone();
            let mut p = 0;
            let mut spiking_index = 0;
            for (li, layer) in self.spec.layers.iter().enumerate().skip(1) {
                flow = match layer {
                    Layer::Encoder { .. } => unreachable!("validated"),
                    Layer::Dense { inputs, bias, .. } => {
                        let x = exec.reshape(&flow, &[batch, *inputs])?;
                        let mut y = exec.matmul(&x, &params[p])?;
                        p += 1;
                        if *bias {
                            y = exec.add_row(&y, &params[p])?;
                            p += 1;
                        }
                        y
                    }
                    Layer::Conv2d {
                        stride,
                        padding,
                        bias,
                        ..
                    } => {
                        let x = exec.reshape(&flow, &with_batch(&in_shape))?;
                        let b = bias.then(|| &params[p + 1]);
                        let y = exec.conv2d(&x, &params[p], b, *stride, *padding)?;
                        p += 1 + *bias as usize;
                        y
                    }
                    Layer::MaxPool { kernel, stride } => {
                        let x = exec.reshape(&flow, &with_batch(&in_shape))?;
                        exec.maxpool2d(&x, *kernel, *stride)?
                    }
                    Layer::Spiking { .. } => {
                        let cell = cells[li].as_ref().expect("spiking layer has a cell");
                        let (v_prev, s_prev) = match states[li].take() {
                            Some(st) => st,
                            None => {
                                let z = Tensor::zeros(&exec.shape(&flow));
                                (exec.constant(z.clone()), exec.constant(z))
                            }
                        };
                        let (v, s) = cell.step_exec(exec, &v_prev, &s_prev, &flow)?;
                        states[li] = Some((v, s.clone()));
                        if record {
                            if layer_spikes.len() <= spiking_index {
                                layer_spikes.push(Vec::new());
                            }
                            layer_spikes[spiking_index].push(s.clone());
                        }
                        spiking_index += 1;
                        s
                    }
                };
                in_shape = shapes[li - 1].clone();
            }
            outputs.push(exec.reshape(&flow, &[batch, in_shape.iter().product()])?);
        }
        let activity = exec.add_n(&outputs)?;
        Ok(ForwardOutput {
            activity,
            output_spikes: outputs,
            layer_spikes,
        })
    }
}

/// Index of the largest entry per row, lowest index on ties.
pub fn argmax_rows<T: Element>(activity: &Tensor<T>) -> Vec<usize> {
    let c = activity.shape().last().copied().unwrap_or(1).max(1);
    activity
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eager, Tape};
    use crate::encoding::encode_batch;

    fn spikes_batch(b: usize, n_steps: usize, seed: u64) -> EncodedBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..784).map(|_| rng.gen::<f64>()).collect())
            .collect();
        encode_batch(EncodingKind::Bernoulli, &samples, &[1, 28, 28], n_steps, &mut rng).unwrap()
    }

    #[test]
    fn preset_sizes() {
        let net = Network::<f32>::init(build_preset("shallow").unwrap(), 0).unwrap();
        assert_eq!(net.n_params(), 7840);
        assert_eq!(net.spec.n_outputs().unwrap(), 10);

        let conv = build_preset("conv-sp-lin-sp").unwrap();
        assert_eq!(conv.shapes().unwrap()[1], vec![4, 14, 14]);

        let hidden = build_preset("lin-sp-lin-sp").unwrap();
        assert_eq!(hidden.shapes().unwrap()[0], vec![30]);

        let two = build_preset("conv-sp-conv-sp-lin-sp").unwrap();
        assert_eq!(two.shapes().unwrap()[3], vec![6, 10, 10]);

        let lenet = build_preset("lenet5-spiking").unwrap();
        let shapes = lenet.shapes().unwrap();
        assert_eq!(shapes[0], vec![6, 28, 28]);
        assert_eq!(shapes[5], vec![16, 5, 5]);
        let weight_layers = lenet
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense { .. } | Layer::Conv2d { .. }))
            .count();
        let spiking = lenet
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Spiking { .. }))
            .count();
        assert_eq!((weight_layers, spiking), (5, 5));

        let analog = build_preset_with(
            "lenet5-spiking",
            &PresetOptions {
                encoding: EncodingKind::ConstantAnalog,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(analog.layers[1], Layer::Spiking { .. }));

        assert!(build_preset("resnet").is_err());
    }

    #[test]
    fn zero_input_gives_zero_activity() {
        let net = Network::<f32>::init(build_preset("lin-sp-lin-sp").unwrap(), 1).unwrap();
        let mut net = net;
        // zero biases
        for (i, shape) in net.spec.param_shapes().iter().enumerate() {
            if shape.len() == 1 {
                net.params[i] = Tensor::zeros(shape);
            }
        }
        let input = EncodedBatch::Spikes(vec![Tensor::zeros(&[3, 1, 28, 28]); 8]);
        let p = net.bind(&Eager);
        let out = net.forward(&Eager, &p, &input, false).unwrap();
        assert!(out.activity.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn activity_bounds_and_consistency() {
        for model in CoarseModel::ALL {
            let mut opts = PresetOptions::default();
            opts.cell.model = model;
            let spec = build_preset_with("conv-sp-lin-sp", &opts).unwrap();
            let mut net = Network::<f32>::init(spec, 3).unwrap();
            for p in &mut net.params {
                *p = p.scale(8.0);
            }
            let input = spikes_batch(4, 9, 2);
            let params = net.bind(&Eager);
            let out = net.forward(&Eager, &params, &input, true).unwrap();
            let summed = out
                .output_spikes
                .iter()
                .skip(1)
                .fold((*out.output_spikes[0]).clone(), |acc, s| acc.add(s).unwrap());
            assert_eq!(&summed, &*out.activity);
            let cap = if model == CoarseModel::II { 5.0 } else { 9.0 };
            assert!(out.activity.data().iter().all(|&a| (0.0..=cap).contains(&a)));
            assert!(out.activity.sum() > 0.0);
            assert_eq!(out.layer_spikes.len(), 2);
        }
    }

    #[test]
    fn eager_and_tape_forward_agree() {
        let net = Network::<f32>::init(build_preset("lenet5-spiking").unwrap(), 7).unwrap();
        let input = spikes_batch(2, 3, 9);
        let pe = net.bind(&Eager);
        let a = net.forward(&Eager, &pe, &input, false).unwrap().activity;
        let tape = Tape::new();
        let pt = net.bind(&&tape);
        let b = net.forward(&&tape, &pt, &input, false).unwrap().activity;
        assert_eq!(*a, b.value());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::<f32>::init(build_preset("shallow").unwrap(), 5).unwrap();
        let run = || {
            let input = spikes_batch(4, 8, 4);
            let p = net.bind(&Eager);
            (*net.forward(&Eager, &p, &input, false).unwrap().activity).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn input_shape_mismatch_is_error() {
        let net = Network::<f32>::init(build_preset("shallow").unwrap(), 5).unwrap();
        let input = EncodedBatch::Spikes(vec![Tensor::zeros(&[2, 100]); 4]);
        let p = net.bind(&Eager);
        assert!(net.forward(&Eager, &p, &input, false).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let a = Tensor::new(vec![2, 3], vec![1.0f32, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&a), vec![1, 0]);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let spec = build_preset("shallow").unwrap();
        assert!(Network::<f32>::from_parts(spec.clone(), vec![Tensor::zeros(&[10, 784])]).is_err());
        assert!(Network::<f32>::from_parts(spec, vec![Tensor::zeros(&[784, 10])]).is_ok());
    }
}
