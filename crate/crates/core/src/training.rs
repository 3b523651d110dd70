//! Loss, optimizer, teacher-forcing schedule and the training loop.

use std::fs::{self, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, SequenceStore};
use crate::error::{Error, Result};
use crate::model::{load_model, partial_path, save_model, Model, RolloutOptions};
use crate::tensor::io::{read_tensor, read_u32, truncated, write_tensor};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Teacher probability falls linearly from 1 to 0 at `sampling_stop_iter`.
    Linear,
    /// Always feed back the model's own predictions.
    ClosedLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every next-frame prediction, warm-up reconstructions included.
    All,
    /// Only the `K` future frames.
    Future,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Halt at this iteration without changing any schedule.
    pub stop_after: Option<u64>,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub sampling_mode: SamplingMode,
    /// Defaults to half of `max_iterations`.
    pub sampling_stop_iter: Option<u64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss_scope: LossScope,
    pub lr_schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many iterations (0: start and end only).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            max_iterations: 1000,
            stop_after: None,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            sampling_mode: SamplingMode::Linear,
            sampling_stop_iter: None,
            lambda1: 1.0,
            lambda2: 1.0,
            loss_scope: LossScope::All,
            lr_schedule: LrSchedule::Constant,
            grad_clip: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) {
            return bad("learning_rate and eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0) {
            return bad("loss weights must be non-negative and not both zero");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn sampling_stop(&self) -> u64 {
        self.sampling_stop_iter.unwrap_or(self.max_iterations / 2)
    }

    fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = (iteration as f64 / self.max_iterations.max(1) as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

// ---- loss -----------------------------------------------------------------

/// `λ1 · mean|pred − target| + λ2 · mean (pred − target)²`.
pub fn loss_l1_l2(pred: &Tensor, target: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    Ok(loss_terms(pred, target, lambda1, lambda2)?.0)
}

/// Total loss plus the unweighted L1 and L2 means.
pub fn loss_terms(pred: &Tensor, target: &Tensor, lambda1: f64, lambda2: f64) -> Result<(Tensor, f64, f64)> {
    let diff = pred.sub(target)?;
    let l1 = diff.abs().mean();
    let l2 = diff.square().mean();
    let (l1v, l2v) = (l1.data()[0], l2.data()[0]);
    let total = match (lambda1 == 0.0, lambda2 == 0.0) {
        (false, false) => l1.scale(lambda1).add(&l2.scale(lambda2))?,
        (false, true) => l1.scale(lambda1),
        (true, false) => l2.scale(lambda2),
        (true, true) => return Err(Error::invalid("loss weights are both zero")),
    };
    Ok((total, l1v, l2v))
}

// ---- optimizer ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// One update of a single parameter buffer. `step` is 1-based.
    pub fn update(&self, param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64) {
        let bc1 = 1.0 - self.beta1.powf(step as f64);
        let bc2 = 1.0 - self.beta2.powf(step as f64);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let theta = param[i];
            param[i] = theta - self.lr * m_hat / (v_hat.sqrt() + self.eps) - self.lr * self.weight_decay * theta;
        }
    }
}

/// First and second moments for every model parameter, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub names: Vec<String>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let params = model.named_params();
        Self {
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            first: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// Applies one AdamW step to every parameter of `model` using the gradients
/// left by `backward`. Parameters that received no gradient are treated as
/// having a zero gradient. Any non-finite gradient aborts before anything
/// is modified.
pub fn adamw_step(model: &mut Model, state: &mut OptimizerState, opt: &AdamW, grad_clip: Option<f64>) -> Result<()> {
    let params = model.named_params();
    if params.len() != state.names.len() || params.iter().zip(&state.names).any(|((n, _), s)| n != s) {
        return Err(Error::invalid("optimizer state does not match model parameters"));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (name, t) in &params {
        let g = t.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; t.numel()]);
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{bad}] is {}", g[bad])));
        }
        grads.push(g);
    }
    if let Some(max_norm) = grad_clip {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    state.step += 1;
    let step = state.step;
    let mut i = 0;
    model.visit_params_mut(|_, t| {
        let mut data = t.data().to_vec();
        opt.update(&mut data, &grads[i], &mut state.first[i], &mut state.second[i], step);
        *t = Tensor::param(data, t.shape()).expect("shape unchanged");
        i += 1;
    });
    Ok(())
}

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"MDOS";
pub const OPTIMIZER_VERSION: u32 = 1;

pub fn write_optimizer_state<W: Write>(w: &mut W, s: &OptimizerState) -> Result<()> {
    w.write_all(OPTIMIZER_MAGIC)?;
    w.write_all(&OPTIMIZER_VERSION.to_le_bytes())?;
    w.write_all(&s.step.to_le_bytes())?;
    w.write_all(&(s.names.len() as u32).to_le_bytes())?;
    for ((name, m), v) in s.names.iter().zip(&s.first).zip(&s.second) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, &Tensor::new(m.clone(), &[m.len()])?)?;
        write_tensor(w, &Tensor::new(v.clone(), &[v.len()])?)?;
    }
    Ok(())
}

pub fn read_optimizer_state<R: Read>(r: &mut R) -> Result<OptimizerState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != OPTIMIZER_MAGIC {
        return Err(Error::format("not an optimizer state file"));
    }
    let version = read_u32(r)?;
    if version != OPTIMIZER_VERSION {
        return Err(Error::format(format!("optimizer state version {version} unsupported")));
    }
    let mut step = [0u8; 8];
    r.read_exact(&mut step).map_err(truncated)?;
    let count = read_u32(r)? as usize;
    let mut s = OptimizerState {
        step: u64::from_le_bytes(step),
        names: Vec::with_capacity(count),
        first: Vec::with_capacity(count),
        second: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        if n > 4096 {
            return Err(Error::format("parameter name too long"));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(truncated)?;
        s.names.push(String::from_utf8(name).map_err(|e| Error::format(e.to_string()))?);
        s.first.push(read_tensor(r, false)?.data().to_vec());
        s.second.push(read_tensor(r, false)?.data().to_vec());
    }
    Ok(s)
}

// ---- schedule -------------------------------------------------------------

/// Probability that a post-warm-up input is ground truth at `iteration`.
pub fn sampling_probability(iteration: u64, cfg: &TrainConfig) -> f64 {
    match cfg.sampling_mode {
        SamplingMode::ClosedLoop => 0.0,
        SamplingMode::Linear => {
            let stop = cfg.sampling_stop();
            if stop == 0 {
                return 0.0;
            }
            (1.0 - iteration as f64 / stop as f64).clamp(0.0, 1.0)
        }
    }
}

// ---- loop -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub teacher_prob: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations_run: u64,
    pub final_step: u64,
    pub records: Vec<LogRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Seed for the teacher-forcing draws of one iteration.
fn rollout_seed(seed: u64, iteration: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ iteration.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Target frames matching the rollout's prediction tensor.
pub fn rollout_targets(frames: &Tensor, input_len: usize, pred_len: usize, scope: LossScope) -> Result<Tensor> {
    match scope {
        LossScope::All => frames.narrow(1, 1, input_len + pred_len - 1),
        LossScope::Future => frames.narrow(1, input_len, pred_len),
    }
}

pub struct Trainer {
    pub model: Model,
    pub state: OptimizerState,
    pub cfg: TrainConfig,
    out_dir: Option<PathBuf>,
}

pub const MODEL_FILE: &str = "model.mdck";
pub const OPTIMIZER_FILE: &str = "optimizer.mdos";
pub const LOG_FILE: &str = "log.jsonl";

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:06}"))
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = OptimizerState::new(&model);
        Ok(Self {
            model,
            state,
            cfg,
            out_dir: None,
        })
    }

    /// Restores model and optimizer state from a checkpoint directory.
    pub fn resume(checkpoint: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = load_model(&checkpoint.join(MODEL_FILE))?;
        let mut r = BufReader::new(fs::File::open(checkpoint.join(OPTIMIZER_FILE))?);
        let state = read_optimizer_state(&mut r)?;
        if state.names != OptimizerState::new(&model).names {
            return Err(Error::format("optimizer state does not match checkpoint model"));
        }
        Ok(Self {
            model,
            state,
            cfg,
            out_dir: None,
        })
    }

    /// Writes checkpoints and the JSONL log under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let ck = checkpoint_dir(dir, self.state.step);
        fs::create_dir_all(&ck)?;
        save_model(&self.model, &ck.join(MODEL_FILE))?;
        let path = ck.join(OPTIMIZER_FILE);
        let tmp = partial_path(&path);
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            write_optimizer_state(&mut w, &self.state)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(ck)
    }

    /// Loss of one training step without updating anything.
    pub fn step_loss(&self, store: &SequenceStore, iteration: u64) -> Result<(Tensor, f64, f64, f64)> {
        let cfg = &self.cfg;
        let mc = self.model.config();
        let idx = batch_indices(store.len(), cfg.batch_size, cfg.seed, iteration);
        let batch = store.batch(&idx)?;
        let p = sampling_probability(iteration, cfg);
        let rollout = self
            .model
            .forward_sequence(&batch.frames, &RolloutOptions::train(p, rollout_seed(cfg.seed, iteration)))?;
        let target = rollout_targets(&batch.frames, mc.input_len, mc.pred_len, cfg.loss_scope)?;
        let pred = match cfg.loss_scope {
            LossScope::All => rollout.predictions.clone(),
            LossScope::Future => rollout.future()?,
        };
        let (loss, l1, l2) = loss_terms(&pred, &target, cfg.lambda1, cfg.lambda2)?;
        Ok((loss, l1, l2, p))
    }

    /// Trains until `max_iterations` (or `stop_after`) optimizer steps
    /// have been taken in total.
    pub fn run(&mut self, store: &SequenceStore) -> Result<TrainSummary> {
        let mc = self.model.config().clone();
        if store.input_len != mc.input_len || store.pred_len() != mc.pred_len {
            return Err(Error::invalid(format!(
                "store split {}+{} does not match model {}+{}",
                store.input_len,
                store.pred_len(),
                mc.input_len,
                mc.pred_len
            )));
        }
        if store.channels != mc.frame_channels {
            return Err(Error::invalid("store channel count does not match model"));
        }
        let end = self.cfg.stop_after.map_or(self.cfg.max_iterations, |s| s.min(self.cfg.max_iterations));
        if end > self.state.step && store.is_empty() {
            return Err(Error::invalid("cannot train on an empty store"));
        }

        let mut log = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?))
            }
            None => None,
        };
        let mut last_checkpoint = None;
        if let Some(dir) = &self.out_dir {
            if !checkpoint_dir(dir, self.state.step).exists() {
                last_checkpoint = Some(self.save_checkpoint(dir)?);
            }
        }

        let start = Instant::now();
        let first = self.state.step;
        let mut records = Vec::new();
        while self.state.step < end {
            let it = self.state.step;
            let (loss, l1, l2, p) = self.step_loss(store, it)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss is {value} at iteration {it}")));
            }
            self.model.zero_grad();
            loss.backward()?;
            drop(loss);
            let mut opt = self.cfg.adamw();
            opt.lr = self.cfg.lr_at(it);
            adamw_step(&mut self.model, &mut self.state, &opt, self.cfg.grad_clip)?;

            let rec = LogRecord {
                iteration: it,
                loss: value,
                l1,
                l2,
                teacher_prob: p,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            records.push(rec);

            if let Some(dir) = &self.out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.state.step % every == 0 {
                    last_checkpoint = Some(self.save_checkpoint(dir)?);
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            if !checkpoint_dir(dir, self.state.step).exists() {
                last_checkpoint = Some(self.save_checkpoint(dir)?);
            } else if last_checkpoint.is_none() {
                last_checkpoint = Some(checkpoint_dir(dir, self.state.step));
            }
        }
        Ok(TrainSummary {
            iterations_run: self.state.step - first,
            final_step: self.state.step,
            records,
            last_checkpoint,
        })
    }
}

/// Fresh training run; see [`Trainer::run`].
pub fn train(model: Model, store: &SequenceStore, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(Model, TrainSummary)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    if let Some(d) = out_dir {
        t = t.with_output(d);
    }
    let summary = t.run(store)?;
    Ok((t.model, summary))
}

/// Mean closed-loop L1+L2 loss over the future frames of every sequence.
pub fn validation_loss(model: &Model, store: &SequenceStore, batch_size: usize, lambda1: f64, lambda2: f64) -> Result<f64> {
    if store.is_empty() {
        return Err(Error::invalid("validation store is empty"));
    }
    let mc = model.config();
    no_grad(|| {
        let mut total = 0.0;
        let idx: Vec<usize> = (0..store.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = store.batch(chunk)?;
            let r = model.forward_sequence(&batch.frames, &RolloutOptions::eval())?;
            let target = rollout_targets(&batch.frames, mc.input_len, mc.pred_len, LossScope::Future)?;
            let loss = loss_l1_l2(&r.future()?, &target, lambda1, lambda2)?.item()?;
            total += loss * chunk.len() as f64;
        }
        Ok(total / store.len() as f64)
    })
}
