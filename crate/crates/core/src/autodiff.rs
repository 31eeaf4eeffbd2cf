//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order. [`Tape::backward`] accumulates into each node's gradient
//! slot; [`Tape::zero_grad`] restores every slot to exact zero.
//!
//! The same kernels back the eager path ([`Eager`]), so a network evaluated
//! through either [`Exec`] implementation produces identical values.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::coarse::CellConstants;
use crate::error::TensorError;
use crate::tensor::{self, heaviside, sigmoid, ConvGeometry, Element, Tensor};

/// Steepness of the logistic surrogate used in the backward pass of a spike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateParams {
    beta: f64,
}

impl SurrogateParams {
    pub fn new(beta: f64) -> Result<Self, TensorError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(TensorError::Invalid(format!(
                "surrogate beta must be positive, got {beta}"
            )));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Local derivative β·σ(βx)·(1−σ(βx)) used in place of the Heaviside derivative.
    pub fn local_grad(&self, x: f64) -> f64 {
        self.beta * sigmoid(self.beta * x) * sigmoid(-self.beta * x)
    }
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { beta: 3.0 }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddN(Vec<usize>),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        cols: Tensor<T>,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    HardSoft {
        input: usize,
        /// Surrogate derivative at the forward input.
        local: Tensor<T>,
    },
    Sigmoid(usize),
    CoarseStep {
        v_prev: usize,
        s_prev: usize,
        current: usize,
        cell: CellConstants<T>,
    },
    Sum(usize),
    Mean(usize),
    Mse {
        input: usize,
        target: Tensor<T>,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    NormalizedNll {
        input: usize,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Op::Leaf)
    }

    fn unary(&self, a: Var<'_, T>, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.requires(&[a.id]);
        self.push(value, rg, op)
    }

    pub fn add(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>, TensorError> {
        let v = self.val(a.id).add(&self.val(b.id))?;
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(v, rg, Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>, TensorError> {
        let v = self.val(a.id).sub(&self.val(b.id))?;
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(v, rg, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>, TensorError> {
        let v = self.val(a.id).mul(&self.val(b.id))?;
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(v, rg, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&self, a: Var<'_, T>, k: T) -> Var<'_, T> {
        let v = self.val(a.id).scale(k);
        self.unary(a, v, Op::Scale(a.id, k))
    }

    pub fn add_scalar(&self, a: Var<'_, T>, k: T) -> Var<'_, T> {
        let v = self.val(a.id).map(|x| x + k);
        self.unary(a, v, Op::AddScalar(a.id))
    }

    pub fn add_n(&self, xs: &[Var<'_, T>]) -> Result<Var<'_, T>, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("add_n of zero terms".into()))?;
        let mut acc = self.val(first.id).clone();
        for x in &xs[1..] {
            acc.add_assign(&self.val(x.id))?;
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(acc, rg, Op::AddN(ids)))
    }

    pub fn matmul(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>, TensorError> {
        let v = tensor::matmul(&self.val(a.id), &self.val(b.id))?;
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(v, rg, Op::MatMul(a.id, b.id)))
    }

    /// `x[M×N] + row[N]` broadcast over rows.
    pub fn add_row(&self, x: Var<'_, T>, row: Var<'_, T>) -> Result<Var<'_, T>, TensorError> {
        let v = tensor::add_row(&self.val(x.id), &self.val(row.id))?;
        let rg = self.requires(&[x.id, row.id]);
        Ok(self.push(v, rg, Op::AddRow(x.id, row.id)))
    }

    pub fn conv2d(
        &self,
        input: Var<'_, T>,
        kernel: Var<'_, T>,
        bias: Option<Var<'_, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'_, T>, TensorError> {
        let out = {
            let b = bias.map(|b| self.val(b.id));
            tensor::conv2d(
                &self.val(input.id),
                &self.val(kernel.id),
                b.as_deref(),
                stride,
                padding,
            )?
        };
        let mut ids = vec![input.id, kernel.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.requires(&ids);
        Ok(self.push(
            out.output,
            rg,
            Op::Conv2d {
                input: input.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                cols: out.cols,
                geometry: out.geometry,
            },
        ))
    }

    pub fn maxpool2d(
        &self,
        input: Var<'_, T>,
        k: usize,
        stride: usize,
    ) -> Result<Var<'_, T>, TensorError> {
        let (v, argmax) = tensor::maxpool2d(&self.val(input.id), k, stride)?;
        Ok(self.unary(
            input,
            v,
            Op::MaxPool {
                input: input.id,
                argmax,
            },
        ))
    }

    pub fn reshape(&self, a: Var<'_, T>, shape: &[usize]) -> Result<Var<'_, T>, TensorError> {
        let v = self.val(a.id).clone().reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a.id)))
    }

    /// Heaviside forward, logistic-derivative backward.
    pub fn hard_soft(&self, x: Var<'_, T>, params: SurrogateParams) -> Var<'_, T> {
        let beta = T::of(params.beta());
        let (hard, local) = {
            let xv = self.val(x.id);
            // σ(βz)·σ(-βz) stays positive where σ(βz) rounds to 1
            let d = xv.map(|z| beta * sigmoid(beta * z) * sigmoid(-beta * z));
            (xv.map(heaviside), d)
        };
        self.unary(x, hard, Op::HardSoft { input: x.id, local })
    }

    pub fn sigmoid(&self, x: Var<'_, T>) -> Var<'_, T> {
        let v = self.val(x.id).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x.id))
    }

    /// One coarse membrane update; see [`CellConstants::update`].
    pub fn coarse_step(
        &self,
        cell: CellConstants<T>,
        v_prev: Var<'_, T>,
        s_prev: Var<'_, T>,
        current: Var<'_, T>,
    ) -> Result<Var<'_, T>, TensorError> {
        let v = {
            let (vp, sp, cur) = (self.val(v_prev.id), self.val(s_prev.id), self.val(current.id));
            vp.check_same_shape(&sp, "coarse_step")?;
            vp.check_same_shape(&cur, "coarse_step")?;
            let mut out = Tensor::zeros(vp.shape());
            cell.update(vp.data(), sp.data(), cur.data(), out.data_mut());
            out
        };
        let rg = self.requires(&[v_prev.id, s_prev.id, current.id]);
        Ok(self.push(
            v,
            rg,
            Op::CoarseStep {
                v_prev: v_prev.id,
                s_prev: s_prev.id,
                current: current.id,
                cell,
            },
        ))
    }

    pub fn sum(&self, a: Var<'_, T>) -> Var<'_, T> {
        let v = Tensor::scalar(self.val(a.id).sum());
        self.unary(a, v, Op::Sum(a.id))
    }

    pub fn mean(&self, a: Var<'_, T>) -> Var<'_, T> {
        let v = {
            let x = self.val(a.id);
            Tensor::scalar(x.sum() / T::of(x.len() as f64))
        };
        self.unary(a, v, Op::Mean(a.id))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&self, x: Var<'_, T>, target: Tensor<T>) -> Result<Var<'_, T>, TensorError> {
        let v = {
            let xv = self.val(x.id);
            xv.check_same_shape(&target, "mse")?;
            let n = T::of(xv.len() as f64);
            let s: T = xv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(s / n)
        };
        Ok(self.unary(x, v, Op::Mse { input: x.id, target }))
    }

    /// Batch-mean softmax cross-entropy of `logits[B×C]` against class labels.
    pub fn softmax_ce(
        &self,
        logits: Var<'_, T>,
        labels: &[usize],
    ) -> Result<Var<'_, T>, TensorError> {
        let (loss, probs) = {
            let z = self.val(logits.id);
            let (b, c) = batch_classes(&z, labels, "softmax_ce")?;
            let mut probs = Tensor::zeros(&[b, c]);
            let mut loss = T::zero();
            for (i, &label) in labels.iter().enumerate() {
                let row = &z.data()[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let denom: T = row.iter().map(|&v| (v - m).exp()).sum();
                for (p, &v) in probs.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *p = (v - m).exp() / denom;
                }
                loss += denom.ln() + m - row[label];
            }
            (loss / T::of(b as f64), probs)
        };
        Ok(self.unary(
            logits,
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-mean `-ln(y[label] / Σ_k y[k])` for positive scores `y[B×K]`.
    pub fn normalized_nll(
        &self,
        y: Var<'_, T>,
        labels: &[usize],
    ) -> Result<Var<'_, T>, TensorError> {
        let loss = {
            let yv = self.val(y.id);
            let (b, k) = batch_classes(&yv, labels, "normalized_nll")?;
            let mut loss = T::zero();
            for (i, &label) in labels.iter().enumerate() {
                let row = &yv.data()[i * k..(i + 1) * k];
                let total: T = row.iter().copied().sum();
                loss += total.ln() - row[label].ln();
            }
            loss / T::of(b as f64)
        };
        Ok(self.unary(
            y,
            Tensor::scalar(loss),
            Op::NormalizedNll {
                input: y.id,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.val(v.id).clone()
    }

    /// Accumulated gradient of a node (zeros if nothing has flowed into it).
    pub fn grad(&self, v: Var<'_, T>) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Propagates ∂root/∂node into every node reachable from the scalar `root`,
    /// adding onto whatever gradients are already stored.
    pub fn backward(&self, root: Var<'_, T>) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.id].value.is_scalar() {
            return Err(TensorError::NotScalar(nodes[root.id].value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        adj[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            for (parent, contrib) in local_grads(&nodes, id, &g)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut adj[parent] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn batch_classes<T: Element>(
    z: &Tensor<T>,
    labels: &[usize],
    op: &'static str,
) -> Result<(usize, usize), TensorError> {
    let [b, c] = z.shape() else {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            shape: z.shape().to_vec(),
        });
    };
    if labels.len() != *b {
        return Err(TensorError::ShapeMismatch {
            op,
            left: z.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= *c) {
        return Err(TensorError::Invalid(format!(
            "{op}: label {l} out of range for {c} classes"
        )));
    }
    Ok((*b, *c))
}

fn local_grads<T: Element>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>, TensorError> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
        Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
        Op::Scale(a, k) => vec![(*a, g.scale(*k))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::AddN(ids) => ids.iter().map(|&i| (i, g.clone())).collect(),
        Op::MatMul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                out.push((*a, tensor::matmul_nt(g, val(*b))?));
            }
            if needs(*b) {
                out.push((*b, tensor::matmul_tn(val(*a), g)?));
            }
            out
        }
        Op::AddRow(x, row) => {
            let n = val(*row).len();
            let mut gr = Tensor::zeros(val(*row).shape());
            for chunk in g.data().chunks(n) {
                for (o, &v) in gr.data_mut().iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            vec![(*x, g.clone()), (*row, gr)]
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            cols,
            geometry,
        } => {
            let (gi, gk, gb) = tensor::conv2d_backward(g, cols, val(*kernel), geometry, needs(*input));
            let mut out = vec![(*kernel, gk)];
            if let Some(gi) = gi {
                out.push((*input, gi));
            }
            if let Some(b) = bias {
                out.push((*b, gb));
            }
            out
        }
        Op::MaxPool { input, argmax } => {
            let mut gi = Tensor::zeros(val(*input).shape());
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gi.data_mut()[src] += gv;
            }
            vec![(*input, gi)]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
        Op::HardSoft { input, local } => vec![(*input, g.mul(local)?)],
        Op::Sigmoid(a) => {
            let local = node.value.map(|s| s * (T::one() - s));
            vec![(*a, g.mul(&local)?)]
        }
        Op::CoarseStep {
            v_prev,
            s_prev,
            current,
            cell,
        } => {
            let n = g.len();
            let mut gv = vec![T::zero(); n];
            let mut gs = vec![T::zero(); n];
            let mut gc = vec![T::zero(); n];
            cell.update_grad(
                val(*v_prev).data(),
                val(*s_prev).data(),
                val(*current).data(),
                g.data(),
                &mut gv,
                &mut gs,
                &mut gc,
            );
            let shape = g.shape().to_vec();
            vec![
                (*v_prev, Tensor::new(shape.clone(), gv)?),
                (*s_prev, Tensor::new(shape.clone(), gs)?),
                (*current, Tensor::new(shape, gc)?),
            ]
        }
        Op::Sum(a) => {
            let gs = g.item()?;
            vec![(*a, Tensor::full(val(*a).shape(), gs))]
        }
        Op::Mean(a) => {
            let x = val(*a);
            let gs = g.item()? / T::of(x.len() as f64);
            vec![(*a, Tensor::full(x.shape(), gs))]
        }
        Op::Mse { input, target } => {
            let x = val(*input);
            let k = g.item()? * T::of(2.0 / x.len() as f64);
            vec![(*input, x.zip_map(target, "mse", |a, b| k * (a - b))?)]
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            let c = probs.shape()[1];
            let k = g.item()? / T::of(labels.len() as f64);
            let mut gl = probs.scale(k);
            for (i, &l) in labels.iter().enumerate() {
                gl.data_mut()[i * c + l] -= k;
            }
            vec![(*logits, gl)]
        }
        Op::NormalizedNll { input, labels } => {
            let y = val(*input);
            let kdim = y.shape()[1];
            let scale = g.item()? / T::of(labels.len() as f64);
            let mut gy = Tensor::zeros(y.shape());
            for (i, &l) in labels.iter().enumerate() {
                let row = &y.data()[i * kdim..(i + 1) * kdim];
                let total: T = row.iter().copied().sum();
                let grow = &mut gy.data_mut()[i * kdim..(i + 1) * kdim];
                for gk in grow.iter_mut() {
                    *gk = scale / total;
                }
                grow[l] -= scale / row[l];
            }
            vec![(*input, gy)]
        }
    })
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn grad(&self) -> Tensor<T> {
        self.tape.grad(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.val(self.id).shape().to_vec()
    }

    pub fn backward(&self) -> Result<(), TensorError> {
        self.tape.backward(*self)
    }
}

/// Execution backend: the network code is written once against this trait and
/// runs either eagerly on plain tensors or recorded on a tape.
pub trait Exec<T: Element> {
    type V: Clone;

    fn constant(&self, value: Tensor<T>) -> Self::V;
    fn param(&self, value: &Tensor<T>) -> Self::V;
    fn value(&self, v: &Self::V) -> Tensor<T>;
    fn shape(&self, v: &Self::V) -> Vec<usize>;

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn add_n(&self, xs: &[Self::V]) -> Result<Self::V, TensorError>;
    fn scale(&self, a: &Self::V, k: T) -> Self::V;
    fn add_scalar(&self, a: &Self::V, k: T) -> Self::V;
    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn add_row(&self, x: &Self::V, row: &Self::V) -> Result<Self::V, TensorError>;
    fn conv2d(
        &self,
        input: &Self::V,
        kernel: &Self::V,
        bias: Option<&Self::V>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V, TensorError>;
    fn maxpool2d(&self, input: &Self::V, k: usize, stride: usize) -> Result<Self::V, TensorError>;
    fn reshape(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V, TensorError>;
    fn hard_soft(&self, x: &Self::V, params: SurrogateParams) -> Self::V;
    fn sigmoid(&self, x: &Self::V) -> Self::V;
    fn coarse_step(
        &self,
        cell: CellConstants<T>,
        v_prev: &Self::V,
        s_prev: &Self::V,
        current: &Self::V,
    ) -> Result<Self::V, TensorError>;
}

/// Eager execution on shared tensors; nothing is recorded.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Exec<T> for Eager {
    type V = Rc<Tensor<T>>;

    fn constant(&self, value: Tensor<T>) -> Self::V {
        Rc::new(value)
    }

    fn param(&self, value: &Tensor<T>) -> Self::V {
        Rc::new(value.clone())
    }

    fn value(&self, v: &Self::V) -> Tensor<T> {
        (**v).clone()
    }

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError> {
        Ok(Rc::new(a.add(b)?))
    }

    fn add_n(&self, xs: &[Self::V]) -> Result<Self::V, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("add_n of zero terms".into()))?;
        let mut acc = (**first).clone();
        for x in &xs[1..] {
            acc.add_assign(x)?;
        }
        Ok(Rc::new(acc))
    }

    fn scale(&self, a: &Self::V, k: T) -> Self::V {
        Rc::new(a.scale(k))
    }

    fn add_scalar(&self, a: &Self::V, k: T) -> Self::V {
        Rc::new(a.map(|x| x + k))
    }

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError> {
        Ok(Rc::new(tensor::matmul(a, b)?))
    }

    fn add_row(&self, x: &Self::V, row: &Self::V) -> Result<Self::V, TensorError> {
        Ok(Rc::new(tensor::add_row(x, row)?))
    }

    fn conv2d(
        &self,
        input: &Self::V,
        kernel: &Self::V,
        bias: Option<&Self::V>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V, TensorError> {
        let out = tensor::conv2d(input, kernel, bias.map(|b| &**b), stride, padding)?;
        Ok(Rc::new(out.output))
    }

    fn maxpool2d(&self, input: &Self::V, k: usize, stride: usize) -> Result<Self::V, TensorError> {
        Ok(Rc::new(tensor::maxpool2d(input, k, stride)?.0))
    }

    fn reshape(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V, TensorError> {
        Ok(Rc::new((**a).clone().reshape(shape)?))
    }

    fn hard_soft(&self, x: &Self::V, _params: SurrogateParams) -> Self::V {
        Rc::new(x.map(heaviside))
    }

    fn sigmoid(&self, x: &Self::V) -> Self::V {
        Rc::new(x.map(sigmoid))
    }

    fn coarse_step(
        &self,
        cell: CellConstants<T>,
        v_prev: &Self::V,
        s_prev: &Self::V,
        current: &Self::V,
    ) -> Result<Self::V, TensorError> {
        v_prev.check_same_shape(s_prev, "coarse_step")?;
        v_prev.check_same_shape(current, "coarse_step")?;
        let mut out = Tensor::zeros(v_prev.shape());
        cell.update(v_prev.data(), s_prev.data(), current.data(), out.data_mut());
        Ok(Rc::new(out))
    }
}

impl<'t, T: Element> Exec<T> for &'t Tape<T> {
    type V = Var<'t, T>;

    fn constant(&self, value: Tensor<T>) -> Self::V {
        Tape::constant(self, value)
    }

    fn param(&self, value: &Tensor<T>) -> Self::V {
        Tape::param(self, value.clone())
    }

    fn value(&self, v: &Self::V) -> Tensor<T> {
        Tape::value(self, *v)
    }

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        v.shape()
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError> {
        Tape::add(self, *a, *b)
    }

    fn add_n(&self, xs: &[Self::V]) -> Result<Self::V, TensorError> {
        Tape::add_n(self, xs)
    }

    fn scale(&self, a: &Self::V, k: T) -> Self::V {
        Tape::scale(self, *a, k)
    }

    fn add_scalar(&self, a: &Self::V, k: T) -> Self::V {
        Tape::add_scalar(self, *a, k)
    }

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError> {
        Tape::matmul(self, *a, *b)
    }

    fn add_row(&self, x: &Self::V, row: &Self::V) -> Result<Self::V, TensorError> {
        Tape::add_row(self, *x, *row)
    }

    fn conv2d(
        &self,
        input: &Self::V,
        kernel: &Self::V,
        bias: Option<&Self::V>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V, TensorError> {
        Tape::conv2d(self, *input, *kernel, bias.copied(), stride, padding)
    }

    fn maxpool2d(&self, input: &Self::V, k: usize, stride: usize) -> Result<Self::V, TensorError> {
        Tape::maxpool2d(self, *input, k, stride)
    }

    fn reshape(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V, TensorError> {
        Tape::reshape(self, *a, shape)
    }

    fn hard_soft(&self, x: &Self::V, params: SurrogateParams) -> Self::V {
        Tape::hard_soft(self, *x, params)
    }

    fn sigmoid(&self, x: &Self::V) -> Self::V {
        Tape::sigmoid(self, *x)
    }

    fn coarse_step(
        &self,
        cell: CellConstants<T>,
        v_prev: &Self::V,
        s_prev: &Self::V,
        current: &Self::V,
    ) -> Result<Self::V, TensorError> {
        Tape::coarse_step(self, cell, *v_prev, *s_prev, *current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        s.backward().unwrap();
        assert_eq!(x.grad(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn mse_at_minimum_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[4], |i| i as f64 * 0.3);
        let x = tape.param(xv.clone());
        let l = tape.mse(x, xv).unwrap();
        l.backward().unwrap();
        assert_eq!(l.value().item().unwrap(), 0.0);
        assert_eq!(x.grad(), Tensor::zeros(&[4]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(x.backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn second_backward_accumulates_and_zero_grad_resets() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[3], |i| 1.0 + i as f64));
        let y = tape.mul(x, x).unwrap();
        let z = tape.sum(y);
        z.backward().unwrap();
        let once = x.grad();
        z.backward().unwrap();
        assert_eq!(x.grad(), once.scale(2.0));
        tape.zero_grad();
        assert_eq!(x.grad(), Tensor::zeros(&[3]));
        assert_eq!(y.grad(), Tensor::zeros(&[3]));
    }

    #[test]
    fn hard_soft_values() {
        let p = SurrogateParams::new(3.0).unwrap();
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![0.3, 0.0, -10.0]).unwrap());
        let s = tape.hard_soft(x, p);
        assert_eq!(s.value().data(), &[1.0, 1.0, 0.0]);
        tape.sum(s).backward().unwrap();
        let g = x.grad();
        assert!((g.data()[1] - 0.75).abs() < 1e-15);
        let expected = 3.0 * sigmoid(-30.0) * (1.0 - sigmoid(-30.0));
        assert!((g.data()[2] - expected).abs() < 1e-25);
        assert!((g.data()[2] - 2.8e-13).abs() < 1e-14);
    }

    #[test]
    fn surrogate_rejects_non_positive_beta() {
        assert!(SurrogateParams::new(0.0).is_err());
        assert!(SurrogateParams::new(-1.0).is_err());
        assert!(SurrogateParams::new(f64::NAN).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let w = tape.param(Tensor::ones(&[2]));
        let y = tape.mul(c, w).unwrap();
        tape.sum(y).backward().unwrap();
        assert_eq!(c.grad(), Tensor::zeros(&[2]));
        assert_eq!(w.grad(), Tensor::ones(&[2]));
    }

    #[test]
    fn softmax_ce_uniform_is_ln_classes() {
        let tape = Tape::<f64>::new();
        let z = tape.param(Tensor::zeros(&[1, 10]));
        let l = tape.softmax_ce(z, &[3]).unwrap();
        assert!((l.value().item().unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let tape = Tape::<f64>::new();
        let z = tape.param(Tensor::zeros(&[1, 10]));
        assert!(tape.softmax_ce(z, &[10]).is_err());
        assert!(tape.normalized_nll(z, &[11]).is_err());
    }
}
