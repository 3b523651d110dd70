//! Dense `f64` tensors with a dynamic reverse-mode gradient graph.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto an immutable buffer. Operations
//! on tensors that depend on a trainable leaf record the producing operation,
//! so calling [`Tensor::backward`] on a scalar result walks the graph in
//! reverse topological order and accumulates gradients into every trainable
//! leaf. The graph is rebuilt on every forward pass and freed when the last
//! handle to its root is dropped.
//!
//! There is no broadcasting: binary operations require identical shapes, and
//! the one channel-expansion the recurrent cells need is an explicit op
//! ([`Tensor::repeat_channels`]).

pub(crate) mod conv;
mod grad;
pub mod gradcheck;
pub mod io;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use gradcheck::grad_check;

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any gradient graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

pub(crate) struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    trainable: bool,
    op: Option<Op>,
}

pub(crate) enum Op {
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        geom: conv::ConvGeom,
    },
    Sigmoid(Tensor),
    Tanh(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Abs(Tensor),
    Square(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Narrow {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    Reshape(Tensor),
    RepeatChannels(Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                v.extend(bias.iter());
                v
            }
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Scale(x, _)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::RepeatChannels(x) => vec![x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat { parts, .. } => parts.iter().collect(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("trainable", &self.0.trainable)
            .field("tracked", &self.0.op.is_some())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("tensor dimensions must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::invalid(format!(
            "shape {shape:?} holds {n} elements but {len} were supplied"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Rc::new(node))
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: `backward` will populate its gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, trainable: bool) -> Self {
        Self::from_node(Node {
            shape,
            data,
            grad: RefCell::new(None),
            trainable,
            op: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(vec![value; shape.iter().product()], shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable
    }

    /// True when a gradient can flow to or through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.0.trainable || self.0.op.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient, if `backward` has reached this leaf.
    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        Ref::filter_map(self.0.grad.borrow(), |g| g.as_ref()).ok()
    }

    pub fn zero_grad(&self) {
        self.0.grad.replace(None);
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn node_ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Builds an op result; the op is only retained when some input needs a
    /// gradient and recording is enabled.
    fn derived(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        Self::from_node(Node {
            shape,
            data,
            grad: RefCell::new(None),
            trainable: false,
            op: track.then_some(op),
        })
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.zip(other, |a, b| a + b);
        Ok(Self::derived(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.zip(other, |a, b| a - b);
        Ok(Self::derived(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "hadamard")?;
        let data = self.zip(other, |a, b| a * b);
        Ok(Self::derived(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.map(|v| v * c);
        Self::derived(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    /// Logistic sigmoid. Saturated outputs are pinned to the nearest
    /// representable values inside (0, 1).
    pub fn sigmoid(&self) -> Tensor {
        let data = self.map(|v| sigmoid_scalar(v).clamp(f64::MIN_POSITIVE, BELOW_ONE));
        Self::derived(data, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    /// Hyperbolic tangent, pinned strictly inside (-1, 1).
    pub fn tanh(&self) -> Tensor {
        let data = self.map(|v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE));
        Self::derived(data, self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let data = self.map(f64::abs);
        Self::derived(data, self.shape().to_vec(), Op::Abs(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        let data = self.map(|v| v * v);
        Self::derived(data, self.shape().to_vec(), Op::Square(self.clone()))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Self::derived(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Self::derived(vec![s / self.numel() as f64], vec![1], Op::Mean(self.clone()))
    }

    // ---- convolution -------------------------------------------------

    /// Same-padded stride-1 cross-correlation.
    ///
    /// `self` is `[B, Ci, H, W]`, `weight` is `[Co, Ci, k, k]` with odd `k`,
    /// `bias` (optional) is `[Co]`. Output is `[B, Co, H, W]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (is, ws) = (self.shape(), weight.shape());
        if is.len() != 4 || ws.len() != 4 || ws[1] != is[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d (input vs weight)", is, ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::shape("conv2d (bias vs weight)", b.shape(), ws));
            }
        }
        let geom = conv::ConvGeom {
            batch: is[0],
            in_ch: is[1],
            out_ch: ws[0],
            height: is[2],
            width: is[3],
            k: ws[2],
        };
        let data = conv::forward(self.data(), weight.data(), bias.map(|b| b.data()), &geom);
        let op = Op::Conv2d {
            input: self.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
        };
        Ok(Self::derived(data, vec![is[0], ws[0], is[2], is[3]], op))
    }

    // ---- normalization -----------------------------------------------

    /// Per-sample normalization over (C, H, W) followed by a per-channel
    /// affine transform.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("layer_norm expects [B,C,H,W], got {s:?}")));
        }
        if gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(Error::shape("layer_norm (affine vs channels)", gamma.shape(), s));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (batch, ch) = (s[0], s[1]);
        let plane = s[2] * s[3];
        let per = ch * plane;
        let mut normalized = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; batch];
        let mut out = vec![0.0; self.numel()];
        for b in 0..batch {
            let xs = &self.data()[b * per..(b + 1) * per];
            let mean = xs.iter().sum::<f64>() / per as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[b] = r;
            for c in 0..ch {
                let (g, bt) = (gamma.data()[c], beta.data()[c]);
                for i in c * plane..(c + 1) * plane {
                    let n = (xs[i] - mean) * r;
                    normalized[b * per + i] = n;
                    out[b * per + i] = g * n + bt;
                }
            }
        }
        let op = Op::LayerNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            normalized,
            inv_std,
        };
        Ok(Self::derived(out, s.to_vec(), op))
    }

    // ---- shape plumbing ----------------------------------------------

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} out of range for rank {rank}")));
        }
        for p in &parts[1..] {
            let ok = p.shape().len() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        Ok(Self::derived(data, shape, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(Self::derived(data, shape, Op::Narrow { x: self.clone(), axis, start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        Ok(Self::derived(self.data().to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Expands a `[B, 1, H, W]` map to `[B, channels, H, W]` by copying.
    pub fn repeat_channels(&self, channels: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || s[1] != 1 || channels == 0 {
            return Err(Error::invalid(format!("repeat_channels expects [B,1,H,W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let mut data = Vec::with_capacity(s[0] * channels * plane);
        for b in 0..s[0] {
            let src = &self.data()[b * plane..(b + 1) * plane];
            for _ in 0..channels {
                data.extend_from_slice(src);
            }
        }
        Ok(Self::derived(data, vec![s[0], channels, s[2], s[3]], Op::RepeatChannels(self.clone())))
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
