//! Encoder → stacked recurrent layers → decoder, unrolled over time.
//!
//! The encoder and decoder are 1×1 convolutions. Layer `l` consumes the
//! (optionally layer-normalized) hidden map of layer `l-1` at the same time
//! step; each layer keeps its own memory map. The decoder reads the last
//! layer's normalized hidden map and predicts the next frame.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    modernn_cell, validate_kernel_set, AttnChannels, CellState, DcbDataflow, DcbParams, DcbTrace, Gate, GateParams,
    GATE_KERNEL,
};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, read_u32, truncated, write_tensor};
use crate::tensor::Tensor;

fn default_kernel_set() -> Vec<usize> {
    vec![3, 5, 7]
}

/// Architecture hyperparameters. Together they fix every tensor shape and
/// hence the parameter count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub frame_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    #[serde(default = "default_kernel_set")]
    pub kernel_set: Vec<usize>,
    /// Number of stacked detail-context blocks per layer.
    pub dcb_blocks: usize,
    pub scale_s: f64,
    pub attn_channels: AttnChannels,
    pub use_dcb: bool,
    pub use_layer_norm: bool,
    pub layer_norm_eps: f64,
    /// Selects [`DcbDataflow::Literal`] for every block.
    pub literal_dataflow: bool,
    pub input_len: usize,
    pub pred_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_channels: 64,
            frame_channels: 1,
            frame_height: 64,
            frame_width: 64,
            kernel_set: default_kernel_set(),
            dcb_blocks: 1,
            scale_s: 2.0,
            attn_channels: AttnChannels::PerChannel,
            use_dcb: true,
            use_layer_norm: true,
            layer_norm_eps: 1e-5,
            literal_dataflow: false,
            input_len: 10,
            pred_len: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_channels", self.hidden_channels),
            ("frame_channels", self.frame_channels),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("dcb_blocks", self.dcb_blocks),
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        validate_kernel_set(&self.kernel_set)?;
        if !(self.scale_s > 0.0 && self.scale_s.is_finite()) {
            return Err(Error::Config(format!("scale_s must be positive, got {}", self.scale_s)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.input_len + self.pred_len
    }

    fn dataflow(&self) -> DcbDataflow {
        if self.literal_dataflow {
            DcbDataflow::Literal
        } else {
            DcbDataflow::Coupled
        }
    }
}

/// One recurrent layer's weights.
#[derive(Clone, Debug)]
pub struct Layer {
    pub dcb: Vec<DcbParams>,
    pub gates: GateParams,
    pub norm: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub encoder_weight: Tensor,
    pub encoder_bias: Tensor,
    pub layers: Vec<Layer>,
    pub decoder_weight: Tensor,
    pub decoder_bias: Tensor,
}

/// Per-tensor initializer keyed by parameter name, so adding or removing a
/// component does not shift the random stream of the others.
struct Init {
    seed: u64,
}

impl Init {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name selects an independent ChaCha stream
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(h);
        rng
    }

    fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor::param(data, shape)
    }
}

fn const_param(shape: &[usize], v: f64) -> Result<Tensor> {
    Tensor::param(vec![v; shape.iter().product()], shape)
}

pub const DCB_INIT_BOUND: f64 = 0.01;
pub const FORGET_BIAS_INIT: f64 = 1.0;

impl Model {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init { seed };
        let c = config.hidden_channels;
        let fc = config.frame_channels;
        let attn_out = config.attn_channels.out_channels(c);
        let gate_bound = 1.0 / ((c * GATE_KERNEL * GATE_KERNEL) as f64).sqrt();

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut dcb = Vec::new();
            if config.use_dcb {
                for j in 0..config.dcb_blocks {
                    let branch = |tag: &str| -> Result<_> {
                        config
                            .kernel_set
                            .iter()
                            .map(|&k| {
                                let name = format!("layers.{l}.dcb.{j}.{tag}.{k}");
                                Ok((k, init.uniform(&name, &[attn_out, c, k, k], DCB_INIT_BOUND)?))
                            })
                            .collect::<Result<_>>()
                    };
                    dcb.push(DcbParams::new(
                        branch("w_h")?,
                        branch("w_x")?,
                        config.scale_s,
                        config.attn_channels,
                        config.dataflow(),
                    )?);
                }
            }
            let ws = [c, c, GATE_KERNEL, GATE_KERNEL];
            let w = |tag: &str, g: Gate| init.uniform(&format!("layers.{l}.gates.{tag}.{}", g.name()), &ws, gate_bound);
            let b = |g: Gate| const_param(&[c], if g == Gate::F { FORGET_BIAS_INIT } else { 0.0 });
            let gates = GateParams::new(
                [w("w_x", Gate::G)?, w("w_x", Gate::I)?, w("w_x", Gate::F)?, w("w_x", Gate::O)?],
                [w("w_h", Gate::G)?, w("w_h", Gate::I)?, w("w_h", Gate::F)?, w("w_h", Gate::O)?],
                [b(Gate::G)?, b(Gate::I)?, b(Gate::F)?, b(Gate::O)?],
            )?;
            let norm = if config.use_layer_norm {
                Some((const_param(&[c], 1.0)?, const_param(&[c], 0.0)?))
            } else {
                None
            };
            layers.push(Layer { dcb, gates, norm });
        }

        Ok(Self {
            encoder_weight: init.uniform("encoder.weight", &[c, fc, 1, 1], 1.0 / (fc as f64).sqrt())?,
            encoder_bias: const_param(&[c], 0.0)?,
            decoder_weight: init.uniform("decoder.weight", &[fc, c, 1, 1], 1.0 / (c as f64).sqrt())?,
            decoder_bias: const_param(&[fc], 0.0)?,
            layers,
            config,
        })
    }

    /// Model whose every parameter is zero (layer-norm gain included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.visit_params_mut(|_, t| {
            *t = Tensor::param(vec![0.0; t.numel()], t.shape()).expect("same shape");
        });
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Visits `(name, tensor)` in the canonical order used by checkpoints
    /// and the optimizer.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("encoder.weight", &self.encoder_weight);
        f("encoder.bias", &self.encoder_bias);
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, block) in layer.dcb.iter().enumerate() {
                for (k, w) in &block.w_h {
                    f(&format!("layers.{l}.dcb.{j}.w_h.{k}"), w);
                }
                for (k, w) in &block.w_x {
                    f(&format!("layers.{l}.dcb.{j}.w_x.{k}"), w);
                }
            }
            for g in Gate::ALL {
                f(&format!("layers.{l}.gates.w_x.{}", g.name()), &layer.gates.w_x[g as usize]);
            }
            for g in Gate::ALL {
                f(&format!("layers.{l}.gates.w_h.{}", g.name()), &layer.gates.w_h[g as usize]);
            }
            for g in Gate::ALL {
                f(&format!("layers.{l}.gates.bias.{}", g.name()), &layer.gates.bias[g as usize]);
            }
            if let Some((gamma, beta)) = &layer.norm {
                f(&format!("layers.{l}.norm.gamma"), gamma);
                f(&format!("layers.{l}.norm.beta"), beta);
            }
        }
        f("decoder.weight", &self.decoder_weight);
        f("decoder.bias", &self.decoder_bias);
    }

    /// Mutable counterpart of [`Model::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("encoder.weight", &mut self.encoder_weight);
        f("encoder.bias", &mut self.encoder_bias);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (j, block) in layer.dcb.iter_mut().enumerate() {
                for (k, w) in block.w_h.iter_mut() {
                    f(&format!("layers.{l}.dcb.{j}.w_h.{k}"), w);
                }
                for (k, w) in block.w_x.iter_mut() {
                    f(&format!("layers.{l}.dcb.{j}.w_x.{k}"), w);
                }
            }
            for g in Gate::ALL {
                f(&format!("layers.{l}.gates.w_x.{}", g.name()), &mut layer.gates.w_x[g as usize]);
            }
            for g in Gate::ALL {
                f(&format!("layers.{l}.gates.w_h.{}", g.name()), &mut layer.gates.w_h[g as usize]);
            }
            for g in Gate::ALL {
                f(&format!("layers.{l}.gates.bias.{}", g.name()), &mut layer.gates.bias[g as usize]);
            }
            if let Some((gamma, beta)) = layer.norm.as_mut() {
                f(&format!("layers.{l}.norm.gamma"), gamma);
                f(&format!("layers.{l}.norm.beta"), beta);
            }
        }
        f("decoder.weight", &mut self.decoder_weight);
        f("decoder.bias", &mut self.decoder_bias);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        self.visit_params(|n, t| v.push((n.to_string(), t.clone())));
        v
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    pub fn zero_grad(&self) {
        self.visit_params(|_, t| t.zero_grad());
    }

    fn check_frame(&self, x: &Tensor, channels: usize, op: &'static str) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != channels {
            return Err(Error::shape(op, s, &[s.first().copied().unwrap_or(0), channels]));
        }
        Ok(())
    }

    /// `[B, frame_channels, H, W]` → `[B, C, H, W]`.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        self.check_frame(frame, self.config.frame_channels, "encode")?;
        frame.conv2d(&self.encoder_weight, Some(&self.encoder_bias))
    }

    /// `[B, C, H, W]` → unclamped frame logits `[B, frame_channels, H, W]`.
    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        self.check_frame(h, self.config.hidden_channels, "decode")?;
        h.conv2d(&self.decoder_weight, Some(&self.decoder_bias))
    }

    /// Unrolls the model over a batch of sequences.
    ///
    /// `frames` is `[B, S, frame_channels, H, W]`. In training mode
    /// `S == input_len + pred_len`; a closed-loop rollout needs only the
    /// observed prefix and never reads beyond it.
    pub fn forward_sequence(&self, frames: &Tensor, opts: &RolloutOptions) -> Result<Rollout> {
        opts.validate()?;
        let cfg = &self.config;
        let (t_in, k_out) = (cfg.input_len, cfg.pred_len);
        let s = frames.shape();
        if s.len() != 5 || s[2] != cfg.frame_channels {
            return Err(Error::shape("forward_sequence", s, &[0, cfg.seq_len(), cfg.frame_channels]));
        }
        let needed = if opts.training { cfg.seq_len() } else { t_in };
        if s[1] < needed || (opts.training && s[1] != needed) {
            return Err(Error::invalid(format!(
                "sequence has {} frames, rollout needs {needed} (T={t_in}, K={k_out})",
                s[1]
            )));
        }
        let (batch, height, width) = (s[0], s[3], s[4]);
        let frame_shape = [batch, cfg.frame_channels, height, width];
        // evaluation only ever sees the observed prefix
        let visible = if opts.training { frames.clone() } else { frames.narrow(1, 0, t_in)?.detach() };
        let frame_at = |t: usize| -> Result<Tensor> { visible.narrow(1, t, 1)?.reshape(&frame_shape) };

        let mut states = (0..cfg.num_layers)
            .map(|_| CellState::zeros(batch, cfg.hidden_channels, height, width))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let steps = t_in + k_out - 1;
        let mut preds: Vec<Tensor> = Vec::with_capacity(steps);
        let mut sources = Vec::with_capacity(steps);
        let mut traces = Vec::new();

        for t in 0..steps {
            let (input, src) = if t < t_in {
                (frame_at(t)?, vec![InputSource::Observed; batch])
            } else {
                let prev = preds.last().expect("t >= input_len >= 1").clone();
                let teach: Vec<bool> = (0..batch).map(|_| rng.gen::<f64>() < opts.teacher_prob).collect();
                let src: Vec<InputSource> = teach
                    .iter()
                    .map(|&b| if b { InputSource::GroundTruth } else { InputSource::Predicted })
                    .collect();
                let input = if teach.iter().all(|&b| !b) {
                    prev
                } else {
                    let truth = frame_at(t)?;
                    if teach.iter().all(|&b| b) {
                        truth
                    } else {
                        mix_per_sample(&prev, &truth, &teach)?
                    }
                };
                (input, src)
            };
            sources.push(src);

            let mut layer_in = self.encode(&input)?;
            let mut step_traces = Vec::with_capacity(cfg.num_layers);
            for (layer, state) in self.layers.iter().zip(states.iter_mut()) {
                let (next, tr) = modernn_cell(&layer_in, state, &layer.dcb, &layer.gates, cfg.use_dcb)?;
                layer_in = match &layer.norm {
                    Some((gamma, beta)) => next.h.layer_norm(gamma, beta, cfg.layer_norm_eps)?,
                    None => next.h.clone(),
                };
                *state = next;
                if opts.collect_traces {
                    step_traces.push(tr);
                }
            }
            if opts.collect_traces {
                traces.push(step_traces);
            }
            preds.push(self.decode(&layer_in)?);
        }

        let stacked: Vec<Tensor> = preds
            .iter()
            .map(|p| p.reshape(&[batch, 1, cfg.frame_channels, height, width]))
            .collect::<Result<_>>()?;
        Ok(Rollout {
            predictions: Tensor::concat(&stacked, 1)?,
            input_len: t_in,
            pred_len: k_out,
            sources,
            traces,
        })
    }
}

/// `prev` where `teach[b]` is false, `truth` where it is true.
fn mix_per_sample(prev: &Tensor, truth: &Tensor, teach: &[bool]) -> Result<Tensor> {
    let per = prev.numel() / teach.len();
    let mask: Vec<f64> = teach.iter().flat_map(|&b| std::iter::repeat(if b { 1.0 } else { 0.0 }).take(per)).collect();
    let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let teacher = Tensor::new(truth.data().iter().zip(&mask).map(|(v, m)| v * m).collect(), truth.shape())?;
    prev.hadamard(&Tensor::new(keep, prev.shape())?)?.add(&teacher)
}

/// Where a recurrent input frame came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSource {
    Observed,
    GroundTruth,
    Predicted,
}

#[derive(Clone, Debug)]
pub struct RolloutOptions {
    /// Probability that a post-warm-up input is the ground-truth frame.
    pub teacher_prob: f64,
    pub seed: u64,
    pub training: bool,
    pub collect_traces: bool,
}

impl RolloutOptions {
    /// Closed-loop inference: own predictions only.
    pub fn eval() -> Self {
        Self {
            teacher_prob: 0.0,
            seed: 0,
            training: false,
            collect_traces: false,
        }
    }

    pub fn train(teacher_prob: f64, seed: u64) -> Self {
        Self {
            teacher_prob,
            seed,
            training: true,
            collect_traces: false,
        }
    }

    pub fn with_traces(mut self) -> Self {
        self.collect_traces = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.teacher_prob) {
            return Err(Error::invalid(format!("teacher_prob {} outside [0, 1]", self.teacher_prob)));
        }
        if !self.training && self.teacher_prob > 0.0 {
            return Err(Error::invalid("evaluation rollouts are closed-loop; teacher_prob must be 0"));
        }
        Ok(())
    }
}

pub struct Rollout {
    /// `[B, T+K-1, frame_channels, H, W]`: prediction of frame `t+1` from
    /// inputs up to `t`, unclamped.
    pub predictions: Tensor,
    pub input_len: usize,
    pub pred_len: usize,
    /// `[step][sample]`
    pub sources: Vec<Vec<InputSource>>,
    /// `[step][layer][block]`, empty unless requested.
    pub traces: Vec<Vec<Vec<DcbTrace>>>,
}

impl Rollout {
    /// The `K` predictions of frames `T+1..=T+K`.
    pub fn future(&self) -> Result<Tensor> {
        self.predictions.narrow(1, self.input_len - 1, self.pred_len)
    }
}

/// Values clipped to `[0, 1]`, detached from any graph.
pub fn clamp_unit(t: &Tensor) -> Result<Tensor> {
    Tensor::new(t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(), t.shape())
}

// ---- parameter accounting ---------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub dcb: usize,
    pub gates: usize,
    pub layer_norm: usize,
}

impl LayerParams {
    pub fn total(&self) -> usize {
        self.dcb + self.gates + self.layer_norm
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub decoder: usize,
    pub per_layer: LayerParams,
    pub num_layers: usize,
    pub total: usize,
}

/// Closed-form parameter count for `config`.
pub fn count_params(config: &ModelConfig) -> ParamBreakdown {
    let c = config.hidden_channels;
    let fc = config.frame_channels;
    let attn_out = config.attn_channels.out_channels(c);
    let dcb = if config.use_dcb {
        let per_block: usize = config.kernel_set.iter().map(|k| 2 * attn_out * c * k * k).sum();
        per_block * config.dcb_blocks
    } else {
        0
    };
    let gates = 8 * c * c * GATE_KERNEL * GATE_KERNEL + 4 * c;
    let layer_norm = if config.use_layer_norm { 2 * c } else { 0 };
    let per_layer = LayerParams { dcb, gates, layer_norm };
    let encoder = c * fc + c;
    let decoder = fc * c + fc;
    let total = encoder + decoder + per_layer.total() * config.num_layers;
    ParamBreakdown {
        encoder,
        decoder,
        per_layer,
        num_layers: config.num_layers,
        total,
    }
}

/// Total reported for the reference architecture.
pub const REFERENCE_TOTAL: usize = 4_590_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub dcb_blocks: usize,
    pub attn_channels: usize,
    pub total: usize,
    /// Relative to the reference, signed.
    pub deviation: f64,
}

/// Counts over `dcb_blocks` 1..=4 and both attention widths, holding the rest of `base` fixed.
pub fn param_sweep(base: &ModelConfig, reference: usize) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for m in 1..=4 {
        for attn in [AttnChannels::Shared, AttnChannels::PerChannel] {
            let cfg = ModelConfig { dcb_blocks: m, attn_channels: attn, use_dcb: true, ..base.clone() };
            let total = count_params(&cfg).total;
            rows.push(SweepRow {
                dcb_blocks: m,
                attn_channels: attn.out_channels(base.hidden_channels),
                total,
                deviation: (total as f64 - reference as f64) / reference as f64,
            });
        }
    }
    rows
}

pub fn closest_row(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().min_by(|a, b| a.deviation.abs().total_cmp(&b.deviation.abs())).copied()
}

// ---- checkpoints ------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the checkpoint to `path` via a `.partial` sibling and a rename.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let tmp = partial_path(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_model(&mut w, model)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn partial_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    s.into()
}

pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let params = model.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in &params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_model(&mut r)
}

fn read_string<R: Read>(r: &mut R, max: usize) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > max {
        return Err(Error::format(format!("string length {n} exceeds limit {max}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|e| Error::format(format!("invalid utf-8: {e}")))
}

/// Parses a checkpoint. Nothing is returned unless every record matched.
pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("not a checkpoint (magic {magic:?})")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_json = read_string(r, 1 << 20)?;
    let config: ModelConfig = serde_json::from_str(&cfg_json)?;
    let mut model = Model::zeros(config)?;
    let expected = model.named_params();
    let count = read_u32(r)? as usize;
    if count != expected.len() {
        return Err(Error::format(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, skeleton) in &expected {
        let got = read_string(r, 4096)?;
        if &got != name {
            return Err(Error::format(format!("expected tensor {name}, found {got}")));
        }
        let t = read_tensor(r, true)?;
        if t.shape() != skeleton.shape() {
            return Err(Error::format(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                t.shape(),
                skeleton.shape()
            )));
        }
        loaded.push(t);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    let mut it = loaded.into_iter();
    model.visit_params_mut(|_, t| *t = it.next().expect("count checked"));
    Ok(model)
}
