//! Recurrent cells: the detail-context attention block (DCB), the ConvLSTM
//! gate update, and their composition.
//!
//! The DCB couples the input `x` and context `h_prev` before the gates see
//! them:
//!
//! ```text
//! attn_h = sigmoid(mean_k conv_k(h_prev, w_h[k]))
//! x_hat  = s * attn_h ∘ x
//! attn_x = sigmoid(mean_k conv_k(x_hat, w_x[k]))
//! h_hat  = s * attn_x ∘ h_prev
//! ```
//!
//! With all attention weights zero, both maps are exactly 0.5 and `s = 2`
//! turns the block into the identity, so a DCB cell reproduces the plain
//! ConvLSTM cell bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel size of every gate convolution.
pub const GATE_KERNEL: usize = 5;

/// Output channels of the attention convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnChannels {
    /// One spatial map shared by all channels (C → 1).
    Shared,
    /// A separate map per channel (C → C).
    PerChannel,
}

impl AttnChannels {
    pub fn out_channels(self, channels: usize) -> usize {
        match self {
            AttnChannels::Shared => 1,
            AttnChannels::PerChannel => channels,
        }
    }
}

/// Which tensors the two attention maps reweight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcbDataflow {
    /// `x_hat` reweights the input, `h_hat` reweights the context.
    #[default]
    Coupled,
    /// Symbol-for-symbol reading of the block's equations: both outputs are
    /// derived from the context and the current input is not consumed.
    Literal,
}

/// Weights of one detail-context block.
#[derive(Clone, Debug)]
pub struct DcbParams {
    pub w_h: BTreeMap<usize, Tensor>,
    pub w_x: BTreeMap<usize, Tensor>,
    pub scale: f64,
    pub attn_channels: AttnChannels,
    pub dataflow: DcbDataflow,
    channels: usize,
}

pub fn validate_kernel_set(kernel_set: &[usize]) -> Result<()> {
    if kernel_set.is_empty() {
        return Err(Error::Config("kernel set must not be empty".into()));
    }
    if kernel_set.iter().any(|k| k % 2 == 0) {
        return Err(Error::Config(format!("kernel sizes must be odd, got {kernel_set:?}")));
    }
    if kernel_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("kernel sizes must be strictly increasing, got {kernel_set:?}")));
    }
    Ok(())
}

impl DcbParams {
    pub fn new(
        w_h: BTreeMap<usize, Tensor>,
        w_x: BTreeMap<usize, Tensor>,
        scale: f64,
        attn_channels: AttnChannels,
        dataflow: DcbDataflow,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        let kernels: Vec<usize> = w_h.keys().copied().collect();
        validate_kernel_set(&kernels)?;
        if !w_x.keys().eq(w_h.keys()) {
            return Err(Error::Config("context and input branches use different kernel sets".into()));
        }
        let channels = w_h.values().next().expect("non-empty").shape()[1];
        let out = attn_channels.out_channels(channels);
        for (k, w) in w_h.iter().chain(w_x.iter()) {
            if w.shape() != [out, channels, *k, *k] {
                return Err(Error::shape("dcb weight", w.shape(), &[out, channels, *k, *k]));
            }
        }
        Ok(Self {
            w_h,
            w_x,
            scale,
            attn_channels,
            dataflow,
            channels,
        })
    }

    /// Block with every attention weight zero: the identity when `scale == 2`.
    pub fn zeros(kernel_set: &[usize], channels: usize, scale: f64, attn_channels: AttnChannels) -> Result<Self> {
        validate_kernel_set(kernel_set)?;
        let out = attn_channels.out_channels(channels);
        let make = || -> Result<BTreeMap<usize, Tensor>> {
            kernel_set
                .iter()
                .map(|&k| Ok((k, Tensor::param(vec![0.0; out * channels * k * k], &[out, channels, k, k])?)))
                .collect()
        };
        Self::new(make()?, make()?, scale, attn_channels, DcbDataflow::Coupled)
    }

    pub fn kernel_set(&self) -> Vec<usize> {
        self.w_h.keys().copied().collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_params(&self) -> usize {
        self.w_h.values().chain(self.w_x.values()).map(Tensor::numel).sum()
    }
}

/// Attention maps produced by one block, before channel expansion.
#[derive(Clone, Debug)]
pub struct DcbTrace {
    pub attn_h: Tensor,
    pub attn_x: Tensor,
}

/// `sigmoid(sum_k conv(input, w[k]) / |k|)`, no bias.
fn attention(input: &Tensor, weights: &BTreeMap<usize, Tensor>) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for w in weights.values() {
        let r = input.conv2d(w, None)?;
        acc = Some(match acc {
            None => r,
            Some(a) => a.add(&r)?,
        });
    }
    let acc = acc.expect("kernel set is non-empty");
    let n = weights.len();
    let mean = if n == 1 { acc } else { acc.scale(1.0 / n as f64) };
    Ok(mean.sigmoid())
}

fn reweight(attn: &Tensor, target: &Tensor, scale: f64) -> Result<Tensor> {
    let ch = target.shape()[1];
    let attn = if attn.shape()[1] == ch { attn.clone() } else { attn.repeat_channels(ch)? };
    Ok(attn.hadamard(target)?.scale(scale))
}

fn check_pair(x: &Tensor, h: &Tensor, channels: usize, op: &'static str) -> Result<()> {
    if x.shape() != h.shape() {
        return Err(Error::shape(op, x.shape(), h.shape()));
    }
    if x.shape().len() != 4 || x.shape()[1] != channels {
        return Err(Error::shape(op, x.shape(), &[x.shape().first().copied().unwrap_or(0), channels]));
    }
    Ok(())
}

/// One detail-context block. Returns `(x_hat, h_hat, trace)`.
pub fn dcb_forward(x: &Tensor, h_prev: &Tensor, p: &DcbParams) -> Result<(Tensor, Tensor, DcbTrace)> {
    check_pair(x, h_prev, p.channels, "dcb_forward")?;
    let attn_h = attention(h_prev, &p.w_h)?;
    let (x_hat, h_hat, attn_x) = match p.dataflow {
        DcbDataflow::Coupled => {
            let x_hat = reweight(&attn_h, x, p.scale)?;
            let attn_x = attention(&x_hat, &p.w_x)?;
            let h_hat = reweight(&attn_x, h_prev, p.scale)?;
            (x_hat, h_hat, attn_x)
        }
        DcbDataflow::Literal => {
            let x_hat = reweight(&attn_h, h_prev, p.scale)?;
            let attn_x = attention(&x_hat, &p.w_x)?;
            let h_hat = reweight(&attn_x, &x_hat, p.scale)?;
            (x_hat, h_hat, attn_x)
        }
    };
    Ok((x_hat, h_hat, DcbTrace { attn_h, attn_x }))
}

/// Applies `blocks` in order, threading `(x_hat, h_hat)` through.
pub fn dcb_stack(x: &Tensor, h_prev: &Tensor, blocks: &[DcbParams]) -> Result<(Tensor, Tensor, Vec<DcbTrace>)> {
    if blocks.is_empty() {
        return Err(Error::invalid(
            "dcb_stack needs at least one block; disable the block with use_dcb=false instead",
        ));
    }
    let (mut xs, mut hs) = (x.clone(), h_prev.clone());
    let mut traces = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (nx, nh, tr) = dcb_forward(&xs, &hs, b)?;
        xs = nx;
        hs = nh;
        traces.push(tr);
    }
    Ok((xs, hs, traces))
}

/// Gate order used throughout: candidate `g`, input `i`, forget `f`, output `o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    G = 0,
    I = 1,
    F = 2,
    O = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::G, Gate::I, Gate::F, Gate::O];

    pub fn name(self) -> &'static str {
        match self {
            Gate::G => "g",
            Gate::I => "i",
            Gate::F => "f",
            Gate::O => "o",
        }
    }
}

/// ConvLSTM weights: per gate an input kernel, a context kernel and a bias.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w_x: [Tensor; 4],
    pub w_h: [Tensor; 4],
    pub bias: [Tensor; 4],
    channels: usize,
}

impl GateParams {
    pub fn new(w_x: [Tensor; 4], w_h: [Tensor; 4], bias: [Tensor; 4]) -> Result<Self> {
        let channels = bias[0].shape()[0];
        let ws = [channels, channels, GATE_KERNEL, GATE_KERNEL];
        for w in w_x.iter().chain(w_h.iter()) {
            if w.shape() != ws {
                return Err(Error::shape("gate weight", w.shape(), &ws));
            }
        }
        for b in &bias {
            if b.shape() != [channels] {
                return Err(Error::shape("gate bias", b.shape(), &[channels]));
            }
        }
        Ok(Self {
            w_x,
            w_h,
            bias,
            channels,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        let w = || Tensor::param(vec![0.0; channels * channels * 25], &[channels, channels, GATE_KERNEL, GATE_KERNEL]);
        let b = || Tensor::param(vec![0.0; channels], &[channels]);
        Self::new([w()?, w()?, w()?, w()?], [w()?, w()?, w()?, w()?], [b()?, b()?, b()?, b()?])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_params(&self) -> usize {
        self.w_x.iter().chain(&self.w_h).chain(&self.bias).map(Tensor::numel).sum()
    }
}

/// Hidden map `h` and memory map `c` of one layer.
#[derive(Clone, Debug)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let shape = [batch, channels, height, width];
        Ok(Self {
            h: Tensor::zeros(&shape)?,
            c: Tensor::zeros(&shape)?,
        })
    }
}

/// ConvLSTM update.
///
/// The eight gate convolutions are evaluated as one convolution of the
/// channel-concatenated `[x_in, h_in]` against the stacked gate kernels,
/// which is the same sum computed in a single pass.
pub fn convlstm_gates(x_in: &Tensor, h_in: &Tensor, c_prev: &Tensor, p: &GateParams) -> Result<CellState> {
    check_pair(x_in, h_in, p.channels, "convlstm_gates")?;
    if c_prev.shape() != h_in.shape() {
        return Err(Error::shape("convlstm_gates (memory)", c_prev.shape(), h_in.shape()));
    }
    let c = p.channels;
    let per_gate = Gate::ALL
        .iter()
        .map(|&g| Tensor::concat(&[p.w_x[g as usize].clone(), p.w_h[g as usize].clone()], 1))
        .collect::<Result<Vec<_>>>()?;
    let weight = Tensor::concat(&per_gate, 0)?;
    let bias = Tensor::concat(&p.bias, 0)?;
    let input = Tensor::concat(&[x_in.clone(), h_in.clone()], 1)?;
    let pre = input.conv2d(&weight, Some(&bias))?;

    let g = pre.narrow(1, 0, c)?.tanh();
    let i = pre.narrow(1, c, c)?.sigmoid();
    let f = pre.narrow(1, 2 * c, c)?.sigmoid();
    let o = pre.narrow(1, 3 * c, c)?.sigmoid();
    let c_next = f.hadamard(c_prev)?.add(&i.hadamard(&g)?)?;
    let h_next = o.hadamard(&c_next.tanh())?;
    Ok(CellState { h: h_next, c: c_next })
}

/// DCB-augmented ConvLSTM step. With `use_dcb == false` this is exactly
/// [`convlstm_gates`] on the raw input and state.
pub fn modernn_cell(
    x: &Tensor,
    state: &CellState,
    dcb: &[DcbParams],
    gates: &GateParams,
    use_dcb: bool,
) -> Result<(CellState, Vec<DcbTrace>)> {
    if use_dcb {
        let (x_hat, h_hat, traces) = dcb_stack(x, &state.h, dcb)?;
        Ok((convlstm_gates(&x_hat, &h_hat, &state.c, gates)?, traces))
    } else {
        Ok((convlstm_gates(x, &state.h, &state.c, gates)?, Vec::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|i| ((i as f64) * 0.731 + phase).sin()).collect(), shape).unwrap()
    }

    #[test]
    fn kernel_set_validation() {
        assert!(validate_kernel_set(&[3, 5, 7]).is_ok());
        assert!(validate_kernel_set(&[]).is_err());
        assert!(validate_kernel_set(&[3, 4]).is_err());
        assert!(validate_kernel_set(&[5, 3]).is_err());
        assert!(validate_kernel_set(&[3, 3]).is_err());
    }

    #[test]
    fn dcb_rejects_bad_scale_and_mismatched_branches() {
        assert!(DcbParams::zeros(&[3], 2, 0.0, AttnChannels::PerChannel).is_err());
        let a = DcbParams::zeros(&[3], 2, 2.0, AttnChannels::PerChannel).unwrap();
        let b = DcbParams::zeros(&[5], 2, 2.0, AttnChannels::PerChannel).unwrap();
        assert!(DcbParams::new(a.w_h.clone(), b.w_x.clone(), 2.0, AttnChannels::PerChannel, DcbDataflow::Coupled).is_err());
    }

    #[test]
    fn zero_weights_are_identity() {
        let p = DcbParams::zeros(&[3, 5, 7], 2, 2.0, AttnChannels::PerChannel).unwrap();
        let x = ramp(&[1, 2, 6, 6], 0.1);
        let h = ramp(&[1, 2, 6, 6], 1.3);
        let (xh, hh, tr) = dcb_forward(&x, &h, &p).unwrap();
        assert_eq!(xh.data(), x.data());
        assert_eq!(hh.data(), h.data());
        assert!(tr.attn_h.data().iter().chain(tr.attn_x.data()).all(|&v| v == 0.5));
    }

    #[test]
    fn zero_input_gives_flat_input_attention() {
        let mut p = DcbParams::zeros(&[3], 2, 2.0, AttnChannels::PerChannel).unwrap();
        for w in p.w_h.values_mut().chain(p.w_x.values_mut()) {
            *w = ramp(w.shape(), 0.4);
        }
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let h = ramp(&[1, 2, 4, 4], 0.2);
        let (xh, _, tr) = dcb_forward(&x, &h, &p).unwrap();
        assert!(xh.data().iter().all(|&v| v == 0.0));
        assert!(tr.attn_x.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shared_attention_broadcasts_over_channels() {
        let mut p = DcbParams::zeros(&[3], 3, 2.0, AttnChannels::Shared).unwrap();
        for w in p.w_h.values_mut().chain(p.w_x.values_mut()) {
            *w = ramp(w.shape(), 0.9);
        }
        let x = ramp(&[2, 3, 5, 5], 0.0);
        let h = ramp(&[2, 3, 5, 5], 2.0);
        let (xh, hh, tr) = dcb_forward(&x, &h, &p).unwrap();
        assert_eq!(tr.attn_h.shape(), &[2, 1, 5, 5]);
        assert_eq!(xh.shape(), x.shape());
        assert_eq!(hh.shape(), h.shape());
    }

    #[test]
    fn empty_stack_is_rejected() {
        let x = ramp(&[1, 2, 4, 4], 0.0);
        assert!(dcb_stack(&x, &x, &[]).is_err());
    }

    #[test]
    fn zero_gates_closed_form() {
        let p = GateParams::zeros(2).unwrap();
        let x = ramp(&[1, 2, 4, 4], 0.3);
        let h = ramp(&[1, 2, 4, 4], 0.9);
        let c0 = ramp(&[1, 2, 4, 4], 2.1).scale(3.0);
        let s = convlstm_gates(&x, &h, &c0, &p).unwrap();
        for ((c, h), c_prev) in s.c.data().iter().zip(s.h.data()).zip(c0.data()) {
            assert_eq!(*c, 0.5 * c_prev);
            assert_eq!(*h, 0.5 * (0.5 * c_prev).tanh());
        }
    }

    #[test]
    fn saturated_forget_gate_remembers() {
        let mut p = GateParams::zeros(2).unwrap();
        p.bias[Gate::F as usize] = Tensor::param(vec![500.0; 2], &[2]).unwrap();
        let x = ramp(&[1, 2, 3, 3], 0.3);
        let c0 = ramp(&[1, 2, 3, 3], 1.7);
        let s = convlstm_gates(&x, &x, &c0, &p).unwrap();
        for (c, c_prev) in s.c.data().iter().zip(c0.data()) {
            assert!((c - c_prev).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_reject_mismatched_memory() {
        let p = GateParams::zeros(2).unwrap();
        let x = ramp(&[1, 2, 3, 3], 0.3);
        let c0 = ramp(&[1, 2, 4, 4], 1.7);
        assert!(convlstm_gates(&x, &x, &c0, &p).is_err());
        let wrong_ch = ramp(&[1, 3, 3, 3], 0.0);
        assert!(convlstm_gates(&wrong_ch, &wrong_ch, &wrong_ch, &p).is_err());
    }
}
