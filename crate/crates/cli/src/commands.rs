use std::fs;
use std::path::{Path, PathBuf};

use modelab_core::data::{
    generate_moving_mnist, generate_moving_shapes, load_idx, read_sequence_store, write_sequence_store, SequenceStore,
};
use modelab_core::metrics::{channel_mean, evaluate, Predictor};
use modelab_core::model::{
    closest_row, count_params as breakdown, load_model, param_sweep, Model, RolloutOptions, REFERENCE_TOTAL,
};
use modelab_core::tensor::no_grad;
use modelab_core::training::{validation_loss, Trainer, MODEL_FILE};
use modelab_core::{Error, Result};
use serde_json::json;

use crate::config::{DataKind, RunConfig};
use crate::pgm;
use crate::ReportFormat;

fn model_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MODEL_FILE)
    } else {
        p.to_path_buf()
    }
}

fn build_store(cfg: &RunConfig, count: usize) -> Result<SequenceStore> {
    let d = &cfg.data;
    match d.kind {
        DataKind::Shapes => generate_moving_shapes(count, d.seed, &d.gen),
        DataKind::Mnist => {
            let (Some(images), Some(labels)) = (&d.mnist_images, &d.mnist_labels) else {
                return Err(Error::Config("mnist data needs data.mnist_images and data.mnist_labels".into()));
            };
            generate_moving_mnist(&load_idx(images, labels)?, count, d.seed, &d.gen)
        }
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let store = build_store(cfg, count.unwrap_or(cfg.data.count))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_sequence_store(out, &store)?;
    let summary = json!({
        "path": out,
        "sequences": store.len(),
        "seq_len": store.seq_len,
        "input_len": store.input_len,
        "frame": [store.channels, store.height, store.width],
        "sha256": store.checksum(),
    });
    println!("{summary}");
    Ok(())
}

pub fn train(mut cfg: RunConfig, out: Option<&Path>, store: Option<&Path>, resume: Option<&Path>, baseline: bool) -> Result<()> {
    if baseline {
        cfg.model.use_dcb = false;
    }
    let out_dir = out.map_or_else(|| cfg.paths.out_dir.clone(), Path::to_path_buf);
    fs::create_dir_all(&out_dir)?;
    pgm::write_atomic(&out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;

    let store = match store.or(cfg.paths.train_store.as_deref()) {
        Some(p) => read_sequence_store(p)?,
        None => build_store(&cfg, cfg.data.count)?,
    };
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, cfg.train.clone())?,
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    }
    .with_output(&out_dir);
    let summary = trainer.run(&store)?;
    let val = match &cfg.paths.val_store {
        Some(p) => Some(validation_loss(
            &trainer.model,
            &read_sequence_store(p)?,
            cfg.eval.batch_size,
            cfg.train.lambda1,
            cfg.train.lambda2,
        )?),
        None => None,
    };
    let line = json!({
        "iterations_run": summary.iterations_run,
        "final_step": summary.final_step,
        "final_loss": summary.records.last().map(|r| r.loss),
        "validation_loss": val,
        "checkpoint": summary.last_checkpoint,
    });
    println!("{line}");
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, store: Option<&Path>, format: ReportFormat, out: Option<&Path>) -> Result<()> {
    let model = load_model(&model_file(checkpoint))?;
    let path = store
        .or(cfg.paths.val_store.as_deref())
        .ok_or_else(|| Error::Config("eval needs --store or paths.val_store".into()))?;
    let report = evaluate(&model, &read_sequence_store(path)?, &cfg.eval)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        pgm::write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
        pgm::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    }
    match format {
        ReportFormat::Table => print!("{}", report.to_table()),
        ReportFormat::Json => println!("{}", report.to_json()?),
    }
    Ok(())
}

/// Channel mean of frame `t` of a `[S, C, H, W]` sequence slice.
fn frame_gray(seq: &[f64], t: usize, channels: usize, plane: usize) -> Vec<f64> {
    let f = &seq[t * channels * plane..(t + 1) * channels * plane];
    (0..plane).map(|i| (0..channels).map(|c| f[c * plane + i]).sum::<f64>() / channels as f64).collect()
}

pub fn predict(checkpoint: &Path, store_path: &Path, out: &Path, limit: Option<usize>) -> Result<()> {
    let model = load_model(&model_file(checkpoint))?;
    let store = read_sequence_store(store_path)?;
    let (t_in, k) = (store.input_len, store.pred_len());
    if model.split() != Some((t_in, k)) {
        return Err(Error::InvalidArgument(format!(
            "store split {t_in}+{k} does not match model {:?}",
            model.split()
        )));
    }
    fs::create_dir_all(out)?;
    let n = limit.map_or(store.len(), |l| l.min(store.len()));
    let (c, h, w) = (store.channels, store.height, store.width);
    let plane = h * w;
    let mut raw = SequenceStore::empty(store.seq_len, t_in, c, h, w)?;
    for i in 0..n {
        let batch = store.batch(&[i])?;
        let pred = model.predict(&batch.frames, t_in, k)?;
        let seq = store.sequence(i);
        let observed: Vec<Vec<f64>> = (0..t_in).map(|t| frame_gray(seq, t, c, plane)).collect();
        let truth: Vec<Vec<f64>> = (t_in..t_in + k).map(|t| frame_gray(seq, t, c, plane)).collect();
        let predicted: Vec<Vec<f64>> = (0..k).map(|t| frame_gray(pred.data(), t, c, plane)).collect();
        let rows: Vec<Vec<&[f64]>> = [&observed, &truth, &predicted]
            .iter()
            .map(|r| r.iter().map(Vec::as_slice).collect())
            .collect();
        let (sw, sh, px) = pgm::strip(&rows, h, w);
        pgm::write_atomic(&out.join(format!("seq_{i:04}.pgm")), &pgm::encode(sw, sh, &px))?;

        let mut frames = seq[..t_in * store.frame_len()].to_vec();
        frames.extend_from_slice(pred.data());
        raw.push(store.ids[i].clone(), &frames)?;
    }
    write_sequence_store(&out.join("predictions.mdsq"), &raw)?;
    println!("{}", json!({ "sequences": n, "predicted_frames": k, "out": out }));
    Ok(())
}

fn stats(v: &[f64]) -> serde_json::Value {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({ "min": min, "max": max, "mean": v.iter().sum::<f64>() / v.len() as f64 })
}

pub fn dump_attention(
    checkpoint: &Path,
    store_path: &Path,
    layer: usize,
    step: usize,
    out: &Path,
    sequence: usize,
    block: Option<usize>,
) -> Result<()> {
    let model = load_model(&model_file(checkpoint))?;
    let mc = model.config().clone();
    if !mc.use_dcb {
        return Err(Error::InvalidArgument("checkpoint has no detail-context blocks".into()));
    }
    if layer >= mc.num_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range ({} layers)", mc.num_layers)));
    }
    let steps = mc.input_len + mc.pred_len - 1;
    if step >= steps {
        return Err(Error::InvalidArgument(format!("step {step} out of range ({steps} steps)")));
    }
    let block = block.unwrap_or(mc.dcb_blocks - 1);
    if block >= mc.dcb_blocks {
        return Err(Error::InvalidArgument(format!("block {block} out of range ({} blocks)", mc.dcb_blocks)));
    }
    let store = read_sequence_store(store_path)?;
    if sequence >= store.len() {
        return Err(Error::InvalidArgument(format!("sequence {sequence} out of range ({})", store.len())));
    }
    let batch = store.batch(&[sequence])?;
    let r = no_grad(|| model.forward_sequence(&batch.frames, &RolloutOptions::eval().with_traces()))?;
    let trace = &r.traces[step][layer][block];
    let attn_h = channel_mean(&trace.attn_h, 0);
    let attn_x = channel_mean(&trace.attn_x, 0);
    fs::create_dir_all(out)?;
    let (h, w) = (store.height, store.width);
    pgm::write_atomic(&out.join("attn_h.pgm"), &pgm::encode(w, h, &attn_h))?;
    pgm::write_atomic(&out.join("attn_x.pgm"), &pgm::encode(w, h, &attn_x))?;

    let plane = h * w;
    let frame = frame_gray(store.sequence(sequence), step, store.channels, plane);
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for (a, v) in attn_x.iter().zip(&frame) {
        if *v > 0.0 {
            on.push(*a);
        } else {
            off.push(*a);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summary = json!({
        "sequence": sequence,
        "layer": layer,
        "step": step,
        "block": block,
        "attn_channels": mc.attn_channels,
        "attn_h": stats(&attn_h),
        "attn_x": stats(&attn_x),
        "attn_x_occupied_mean": mean(&on),
        "attn_x_background_mean": mean(&off),
    });
    pgm::write_atomic(&out.join("attention.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("{summary}");
    Ok(())
}

pub fn count_params(cfg: &RunConfig, sweep: bool) -> Result<()> {
    let b = breakdown(&cfg.model);
    println!("encoder      {:>12}", b.encoder);
    println!("per layer    {:>12}", b.per_layer.total());
    println!("  dcb        {:>12}", b.per_layer.dcb);
    println!("  gates      {:>12}", b.per_layer.gates);
    println!("  layer norm {:>12}", b.per_layer.layer_norm);
    println!("layers       {:>12}", b.num_layers);
    println!("decoder      {:>12}", b.decoder);
    println!("total        {:>12}", b.total);
    if sweep {
        println!();
        println!("{:>3} {:>8} {:>12} {:>10}", "m", "attn_ch", "total", "deviation");
        let rows = param_sweep(&cfg.model, REFERENCE_TOTAL);
        let best = closest_row(&rows).expect("non-empty sweep");
        for r in &rows {
            println!("{:>3} {:>8} {:>12} {:>+9.2}%", r.dcb_blocks, r.attn_channels, r.total, r.deviation * 100.0);
        }
        println!(
            "closest to {REFERENCE_TOTAL}: m={} attn_channels={} total={} deviation={:+.2}%",
            best.dcb_blocks,
            best.attn_channels,
            best.total,
            best.deviation * 100.0
        );
    }
    Ok(())
}
