//! Central finite-difference checks of tape gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SurrogateParams, Tape, Var};
use crate::coarse::{CellConstants, CoarseCellParams, CoarseModel};
use crate::encoding::{EncodedBatch, EncodingKind};
use crate::error::Error;
use crate::network::{Layer, Network, NetworkSpec};
use crate::tensor::{sigmoid, Tensor};
use crate::training::{LossKind, LossSpec};

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub entries: usize,
    pub max_abs_err: f64,
    /// `‖analytic − numeric‖₂ / ‖numeric‖₂` (absolute when the numeric norm vanishes).
    pub rel_err: f64,
}

impl GradReport {
    pub fn compare(name: impl Into<String>, analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> Self {
        let mut max_abs: f64 = 0.0;
        let (mut diff2, mut norm2, mut entries) = (0.0, 0.0, 0);
        for (a, n) in analytic.iter().zip(numeric) {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                max_abs = max_abs.max((x - y).abs());
                diff2 += (x - y) * (x - y);
                norm2 += y * y;
                entries += 1;
            }
        }
        let rel = if norm2 > 0.0 { (diff2 / norm2).sqrt() } else { diff2.sqrt() };
        Self {
            name: name.into(),
            entries,
            max_abs_err: max_abs,
            rel_err: rel,
        }
    }
}

/// Gradient of `f` at `inputs` by central differences.
pub fn numeric_grad(
    inputs: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64, Error>,
) -> Result<Vec<Tensor<f64>>, Error> {
    let mut x: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = x[i].data()[j];
            x[i].data_mut()[j] = orig + h;
            let up = f(&x)?;
            x[i].data_mut()[j] = orig - h;
            let down = f(&x)?;
            x[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares the tape gradient of a scalar expression with central differences.
pub fn check_expr<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradReport, Error>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, Error>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| v.grad()).collect();
    let numeric = numeric_grad(inputs, FD_STEP, |x| {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = x.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(build(&tape, &vars)?.value().item()?)
    })?;
    Ok(GradReport::compare(name, &analytic, &numeric))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ out ⊙ W` for a fixed random `W`, turning any op into a scalar.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, &out.shape(), -1.0, 1.0));
    Ok(tape.sum(tape.mul(out, w)?))
}

/// Distinct values spaced far apart relative to [`FD_STEP`], in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("length matches shape")
}

/// Checks every differentiable tape operation on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| uniform(&mut rng, shape, -1.0, 1.0);
    let a = r(&[3, 4]);
    let b = r(&[3, 4]);
    let c = r(&[3, 4]);
    let m = r(&[4, 2]);
    let row = r(&[4]);
    let img = r(&[2, 2, 5, 5]);
    let ker = r(&[3, 2, 3, 3]);
    let cb = r(&[3]);
    let v = r(&[2, 3]);
    let s = r(&[2, 3]);
    let cur = r(&[2, 3]);
    let target = r(&[3, 4]);
    let probs = uniform(&mut rng, &[3, 2], 0.1, 0.9);
    let pool_in = distinct(&mut rng, &[1, 2, 4, 4]);
    let labels = [1usize, 3, 0];

    let mut out = vec![
        check_expr("add", &[a.clone(), b.clone()], |t, x| project(t, t.add(x[0], x[1])?, 1))?,
        check_expr("sub", &[a.clone(), b.clone()], |t, x| project(t, t.sub(x[0], x[1])?, 2))?,
        check_expr("mul", &[a.clone(), b.clone()], |t, x| project(t, t.mul(x[0], x[1])?, 3))?,
        check_expr("scale", &[a.clone()], |t, x| project(t, t.scale(x[0], 1.7), 4))?,
        check_expr("add_scalar", &[a.clone()], |t, x| project(t, t.add_scalar(x[0], -0.3), 5))?,
        check_expr("add_n", &[a.clone(), b.clone(), c.clone()], |t, x| {
            project(t, t.add_n(x)?, 6)
        })?,
        check_expr("matmul", &[a.clone(), m], |t, x| project(t, t.matmul(x[0], x[1])?, 7))?,
        check_expr("add_row", &[a.clone(), row], |t, x| project(t, t.add_row(x[0], x[1])?, 8))?,
        check_expr("conv2d", &[img.clone(), ker.clone(), cb], |t, x| {
            project(t, t.conv2d(x[0], x[1], Some(x[2]), 2, 1)?, 9)
        })?,
        check_expr("conv2d_nobias", &[img, ker], |t, x| {
            project(t, t.conv2d(x[0], x[1], None, 1, 0)?, 10)
        })?,
        check_expr("maxpool2d", &[pool_in], |t, x| project(t, t.maxpool2d(x[0], 2, 2)?, 11))?,
        check_expr("reshape", &[a.clone()], |t, x| project(t, t.reshape(x[0], &[4, 3])?, 12))?,
        check_expr("sigmoid", &[a.clone()], |t, x| project(t, t.sigmoid(x[0]), 13))?,
        check_expr("sum", &[a.clone()], |t, x| Ok(t.sum(x[0])))?,
        check_expr("mean", &[a.clone()], |t, x| Ok(t.mean(x[0])))?,
        check_expr("mse", &[a.clone()], |t, x| Ok(t.mse(x[0], target.clone())?))?,
        check_expr("softmax_ce", &[a], |t, x| Ok(t.softmax_ce(x[0], &labels)?))?,
        check_expr("normalized_nll", &[probs], |t, x| Ok(t.normalized_nll(x[0], &labels[..3].iter().map(|l| l % 2).collect::<Vec<_>>())?))?,
    ];
    for model in CoarseModel::ALL {
        let cell = CellConstants::<f64>::new(model, 2.0)?;
        out.push(check_expr(
            &format!("coarse_step_{model}"),
            &[v.clone(), s.clone(), cur.clone()],
            |t, x| project(t, t.coarse_step(cell, x[0], x[1], x[2])?, 14),
        )?);
    }
    Ok(out)
}

/// The spike op is a hard step forward; its backward must equal the
/// logistic derivative `β σ(βx)(1 − σ(βx))` exactly.
pub fn surrogate_check(beta: f64, seed: u64) -> Result<GradReport, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let s = tape.hard_soft(xv, SurrogateParams::new(beta)?);
    tape.backward(tape.sum(s))?;
    let expected = x.map(|z| {
        let p = sigmoid(beta * z);
        beta * p * (1.0 - p)
    });
    Ok(GradReport::compare("hard_soft_surrogate", &[xv.grad()], &[expected]))
}

/// A two-layer network with relaxed spikes over `n_steps` steps.
pub fn relaxed_spec(n_in: usize, hidden: usize, classes: usize, n_steps: usize) -> NetworkSpec {
    let cell = CoarseCellParams {
        relaxed: true,
        ..CoarseCellParams::default()
    };
    NetworkSpec {
        name: "gradcheck".into(),
        input_shape: vec![n_in],
        n_steps,
        layers: vec![
            Layer::Encoder {
                encoding: EncodingKind::Bernoulli,
            },
            Layer::Dense {
                inputs: n_in,
                outputs: hidden,
                bias: true,
            },
            Layer::Spiking { cell },
            Layer::Dense {
                inputs: hidden,
                outputs: classes,
                bias: true,
            },
            Layer::Spiking { cell },
        ],
    }
}

fn network_loss<'t>(
    tape: &'t Tape<f64>,
    net: &Network<f64>,
    params: &[Var<'t, f64>],
    input: &EncodedBatch<f64>,
    labels: &[usize],
    loss: &LossSpec,
) -> Result<Var<'t, f64>, Error> {
    let out = net.forward(&tape, params, input, false)?;
    loss.on_tape(tape, out.activity, labels)
}

/// End-to-end check of all parameter gradients of a relaxed 2-layer,
/// 4-step network under both losses.
pub fn network_check(seed: u64) -> Result<Vec<GradReport>, Error> {
    let (n_in, hidden, classes, steps, batch) = (6, 5, 3, 4, 3);
    let spec = relaxed_spec(n_in, hidden, classes, steps);
    let net = Network::<f32>::init(spec.clone(), seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let spikes: Vec<Tensor<f64>> = (0..steps)
        .map(|_| Tensor::from_fn(&[batch, n_in], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
        .collect();
    let input = EncodedBatch::Spikes(spikes);
    let labels = [0usize, 2, 1];
    let mut out = Vec::new();
    for (name, kind) in [
        ("network_mse", LossKind::MseSpikeCount),
        ("network_ce", LossKind::CrossEntropyActivity),
    ] {
        let loss = LossSpec { kind, n_out: 2 };
        let tape = Tape::new();
        let params = net.bind(&&tape);
        let l = network_loss(&tape, &net, &params, &input, &labels, &loss)?;
        tape.backward(l)?;
        let analytic: Vec<Tensor<f64>> = params.iter().map(|p| p.grad()).collect();
        let numeric = numeric_grad(&net.params, FD_STEP, |x| {
            let probe = Network::from_parts(spec.clone(), x.to_vec())?;
            let tape = Tape::new();
            let params: Vec<Var<f64>> = x.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(network_loss(&tape, &probe, &params, &input, &labels, &loss)?.value().item()?)
        })?;
        out.push(GradReport::compare(name, &analytic, &numeric));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_reports_zero_for_identical_inputs() {
        let t = Tensor::from_fn(&[3], |i| i as f64);
        let r = GradReport::compare("same", &[t.clone()], &[t]);
        assert_eq!(r.max_abs_err, 0.0);
        assert_eq!(r.rel_err, 0.0);
        assert_eq!(r.entries, 3);
    }

    #[test]
    fn numeric_grad_of_square_is_two_x() {
        let x = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let g = numeric_grad(&[x], 1e-5, |x| Ok(x[0].data().iter().map(|v| v * v).sum())).unwrap();
        assert!((g[0].data()[0] - 3.0).abs() < 1e-8);
        assert!((g[0].data()[1] + 1.0).abs() < 1e-8);
    }
}
