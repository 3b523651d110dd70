//! Frame-wise image-quality metrics and their aggregation over a store.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SequenceStore;
use crate::error::{Error, Result};
use crate::model::{clamp_unit, Model, RolloutOptions};
use crate::tensor::{no_grad, Tensor};

pub const PSNR_SENTINEL_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("metric", &[pred.len()], &[target.len()]));
    }
    Ok(())
}

/// Sum of squared errors over every pixel of the frame.
pub fn mse_frame(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// Sum of absolute errors over every pixel of the frame.
pub fn mae_frame(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the frames were identical and `db` is the sentinel.
    pub infinite: bool,
}

pub fn psnr_frame(pred: &[f64], target: &[f64], max_val: f64) -> Result<Psnr> {
    same_len(pred, target)?;
    if pred.is_empty() {
        return Err(Error::invalid("empty frame"));
    }
    let mse = mse_frame(pred, target)? / pred.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_SENTINEL_DB, infinite: true });
    }
    Ok(Psnr {
        db: 10.0 * (max_val * max_val / mse).log10(),
        infinite: false,
    })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity of two single-channel `height × width` frames.
pub fn ssim_frame(pred: &[f64], target: &[f64], height: usize, width: usize) -> Result<f64> {
    same_len(pred, target)?;
    if pred.len() != height * width {
        return Err(Error::shape("ssim_frame", &[pred.len()], &[height, width]));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "frame {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mx = filter_valid(pred, height, width, &taps);
    let my = filter_valid(target, height, width, &taps);
    let sxx = filter_valid(&prod(pred, pred), height, width, &taps);
    let syy = filter_valid(&prod(target, target), height, width, &taps);
    let sxy = filter_valid(&prod(pred, target), height, width, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

// ---- aggregation ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorConvention {
    /// Per-frame sum over pixels.
    #[default]
    Sum,
    /// Per-frame mean over pixels.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub error_convention: ErrorConvention,
    pub max_val: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            error_convention: ErrorConvention::Sum,
            max_val: 1.0,
        }
    }
}

/// Anything that maps observed frames to future frames.
pub trait Predictor {
    /// The `(input_len, pred_len)` split it was built for, if fixed.
    fn split(&self) -> Option<(usize, usize)>;
    /// `frames` is `[B, S, C, H, W]` with `S ≥ input_len`; returns the
    /// `[B, pred_len, C, H, W]` future, clamped to `[0, 1]`.
    fn predict(&self, frames: &Tensor, input_len: usize, pred_len: usize) -> Result<Tensor>;
}

impl Predictor for Model {
    fn split(&self) -> Option<(usize, usize)> {
        Some((self.config().input_len, self.config().pred_len))
    }

    fn predict(&self, frames: &Tensor, _input_len: usize, _pred_len: usize) -> Result<Tensor> {
        no_grad(|| {
            let r = self.forward_sequence(frames, &RolloutOptions::eval())?;
            clamp_unit(&r.future()?)
        })
    }
}

/// Repeats the last observed frame over the whole horizon.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn split(&self) -> Option<(usize, usize)> {
        None
    }

    fn predict(&self, frames: &Tensor, input_len: usize, pred_len: usize) -> Result<Tensor> {
        let last = frames.narrow(1, input_len - 1, 1)?.detach();
        let copies: Vec<Tensor> = (0..pred_len).map(|_| last.clone()).collect();
        clamp_unit(&Tensor::concat(&copies, 1)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based horizon step.
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
    pub psnr_infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
    pub psnr_infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub mse: String,
    pub mae: String,
    pub psnr: String,
    pub ssim: String,
    pub rollout: String,
}

impl Conventions {
    fn new(cfg: &EvalConfig) -> Self {
        let agg = match cfg.error_convention {
            ErrorConvention::Sum => "sum over pixels per frame",
            ErrorConvention::Mean => "mean over pixels per frame",
        };
        Self {
            mse: format!("squared error, {agg}, averaged over frames and sequences"),
            mae: format!("absolute error, {agg}, averaged over frames and sequences"),
            psnr: format!(
                "10*log10(max^2 / per-pixel mean squared error), max = {}, identical frames reported as {PSNR_SENTINEL_DB} dB and counted",
                cfg.max_val
            ),
            ssim: format!(
                "{SSIM_WINDOW}x{SSIM_WINDOW} gaussian window, sigma {SSIM_SIGMA}, K1 {SSIM_K1}, K2 {SSIM_K2}, range 1, valid region, channel mean"
            ),
            rollout: "closed loop, predictions clamped to [0, 1]".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_sequences: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub frame_shape: [usize; 3],
    pub per_step: Vec<StepMetrics>,
    pub aggregate: Aggregate,
    pub conventions: Conventions,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>10} {:>8} {:>12} {:>12}", "step", "psnr", "ssim", "mse", "mae");
        for m in &self.per_step {
            let _ = writeln!(s, "{:>6} {:>10.4} {:>8.4} {:>12.4} {:>12.4}", m.step, m.psnr, m.ssim, m.mse, m.mae);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "{:>6} {:>10.4} {:>8.4} {:>12.4} {:>12.4}", "mean", a.psnr, a.ssim, a.mse, a.mae);
        let _ = writeln!(
            s,
            "sequences {}  horizon {}  identical-frame psnr count {}",
            self.num_sequences, self.pred_len, a.psnr_infinite
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,psnr,ssim,mse,mae\n");
        for m in &self.per_step {
            let _ = writeln!(s, "{},{},{},{},{}", m.step, m.psnr, m.ssim, m.mse, m.mae);
        }
        s
    }
}

/// Metrics of every future frame of one sequence: `[step] -> (psnr, infinite, ssim, mse, mae)`.
fn frame_metrics(
    pred: &[f64],
    target: &[f64],
    shape: [usize; 3],
    cfg: &EvalConfig,
) -> Result<(f64, bool, f64, f64, f64)> {
    let [c, h, w] = shape;
    let plane = h * w;
    let psnr = psnr_frame(pred, target, cfg.max_val)?;
    let mut ssim = 0.0;
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        ssim += ssim_frame(&pred[r.clone()], &target[r], h, w)?;
    }
    ssim /= c as f64;
    let norm = match cfg.error_convention {
        ErrorConvention::Sum => 1.0,
        ErrorConvention::Mean => pred.len() as f64,
    };
    Ok((psnr.db, psnr.infinite, ssim, mse_frame(pred, target)? / norm, mae_frame(pred, target)? / norm))
}

/// Closed-loop evaluation of `predictor` on every sequence of `store`.
pub fn evaluate(predictor: &dyn Predictor, store: &SequenceStore, cfg: &EvalConfig) -> Result<MetricReport> {
    let (t, k) = (store.input_len, store.pred_len());
    if let Some((mt, mk)) = predictor.split() {
        if (mt, mk) != (t, k) {
            return Err(Error::invalid(format!("store split {t}+{k} does not match predictor {mt}+{mk}")));
        }
    }
    if store.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty store"));
    }
    if k == 0 || t == 0 {
        return Err(Error::invalid("store needs at least one observed and one future frame"));
    }
    let shape = [store.channels, store.height, store.width];
    let flen = store.frame_len();
    let mut sums = vec![[0.0f64; 4]; k];
    let mut infinite = vec![0usize; k];
    let idx: Vec<usize> = (0..store.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let batch = store.batch(chunk)?;
        let pred = predictor.predict(&batch.frames, t, k)?;
        if pred.shape() != [chunk.len(), k, shape[0], shape[1], shape[2]] {
            return Err(Error::shape("evaluate", pred.shape(), &[chunk.len(), k, shape[0], shape[1], shape[2]]));
        }
        let target = batch.frames.narrow(1, t, k)?;
        let (pd, td) = (pred.data(), target.data());
        for b in 0..chunk.len() {
            for s in 0..k {
                let off = (b * k + s) * flen;
                let (p, inf, ss, mse, mae) = frame_metrics(&pd[off..off + flen], &td[off..off + flen], shape, cfg)?;
                let acc = &mut sums[s];
                acc[0] += p;
                acc[1] += ss;
                acc[2] += mse;
                acc[3] += mae;
                infinite[s] += inf as usize;
            }
        }
    }
    let n = store.len() as f64;
    let per_step: Vec<StepMetrics> = sums
        .iter()
        .zip(&infinite)
        .enumerate()
        .map(|(s, (a, inf))| StepMetrics {
            step: s + 1,
            psnr: a[0] / n,
            ssim: a[1] / n,
            mse: a[2] / n,
            mae: a[3] / n,
            psnr_infinite: *inf,
        })
        .collect();
    let mean = |f: fn(&StepMetrics) -> f64| per_step.iter().map(f).sum::<f64>() / k as f64;
    let aggregate = Aggregate {
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        mse: mean(|m| m.mse),
        mae: mean(|m| m.mae),
        psnr_infinite: infinite.iter().sum(),
    };
    Ok(MetricReport {
        num_sequences: store.len(),
        input_len: t,
        pred_len: k,
        frame_shape: shape,
        per_step,
        aggregate,
        conventions: Conventions::new(cfg),
    })
}


// ---- attention ------------------------------------------------------------

/// Channel-mean attention of one sequence at one step, split by a sprite mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionContrast {
    pub sequence: usize,
    pub step: usize,
    pub occupied: f64,
    pub background: f64,
}

/// Channel mean of a `[B, Ca, H, W]` map for sample `b`.
pub fn channel_mean(map: &Tensor, b: usize) -> Vec<f64> {
    let s = map.shape();
    let (ch, plane) = (s[1], s[2] * s[3]);
    let mut out = vec![0.0; plane];
    for c in 0..ch {
        let src = &map.data()[(b * ch + c) * plane..(b * ch + c + 1) * plane];
        out.iter_mut().zip(src).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= ch as f64);
    out
}

/// Mean input-side attention of the last block of `layer` over sprite and
/// background pixels, for every closed-loop step whose frame has both.
///
/// The mask of step `t` is the sprite coverage of frame `t`, taken from the
/// generator when the store carries it and from non-zero pixels otherwise.
pub fn attention_contrast(model: &Model, store: &SequenceStore, layer: usize) -> Result<Vec<AttentionContrast>> {
    let cfg = model.config();
    if !cfg.use_dcb {
        return Err(Error::invalid("model has no detail-context blocks"));
    }
    if layer >= cfg.num_layers {
        return Err(Error::invalid(format!("layer {layer} out of range ({} layers)", cfg.num_layers)));
    }
    if store.channels != 1 {
        return Err(Error::invalid("attention masks need single-channel frames"));
    }
    let plane = store.height * store.width;
    let mut out = Vec::new();
    no_grad(|| -> Result<()> {
        for i in 0..store.len() {
            let batch = store.batch(&[i])?;
            let r = model.forward_sequence(&batch.frames, &RolloutOptions::eval().with_traces())?;
            let seq = store.sequence(i);
            let occ = store.occupancy_of(i);
            for (t, step) in r.traces.iter().enumerate() {
                let attn = channel_mean(&step[layer].last().expect("at least one block").attn_x, 0);
                let mask: Vec<bool> = match occ {
                    Some(o) => o[t * plane..(t + 1) * plane].to_vec(),
                    None => seq[t * plane..(t + 1) * plane].iter().map(|v| *v > 0.0).collect(),
                };
                let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
                for (a, m) in attn.iter().zip(&mask) {
                    if *m {
                        on += a;
                        n_on += 1;
                    } else {
                        off += a;
                        n_off += 1;
                    }
                }
                if n_on > 0 && n_off > 0 {
                    out.push(AttentionContrast {
                        sequence: i,
                        step: t,
                        occupied: on / n_on as f64,
                        background: off / n_off as f64,
                    });
                }
            }
        }
        Ok(())
    })?;
    Ok(out)
}
