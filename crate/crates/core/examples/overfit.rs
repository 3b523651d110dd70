//! Trains a small model on a handful of moving-shapes sequences and reports
//! the closed-loop training error.
//!
//! `cargo run --release --example overfit -- ITERS BATCH LR USE_DCB SEED`

use std::time::Instant;

use modelab_core::data::{generate_moving_shapes, GenParams};
use modelab_core::metrics::{attention_contrast, evaluate, EvalConfig};
use modelab_core::model::{Model, ModelConfig};
use modelab_core::training::{validation_loss, TrainConfig, Trainer};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> modelab_core::Result<()> {
    let iters: u64 = arg(1, 600);
    let batch: usize = arg(2, 4);
    let lr: f64 = arg(3, 3e-3);
    let use_dcb: bool = arg(4, true);
    let seed: u64 = arg(5, 1);
    let sprite: usize = arg(6, 5);

    let gen = GenParams { size: 16, num_digits: 1, seq_len: 10, input_len: 5, speed_min: 1.0, speed_max: 2.0, sprite_size: sprite };
    let train_store = generate_moving_shapes(8, 7, &gen)?;
    let val_store = generate_moving_shapes(64, 8, &gen)?;
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_channels: 16,
        frame_height: 16,
        frame_width: 16,
        kernel_set: vec![3, 5],
        use_dcb,
        input_len: 5,
        pred_len: 5,
        ..ModelConfig::default()
    };
    let tc = TrainConfig { learning_rate: lr, batch_size: batch, max_iterations: iters, seed, ..TrainConfig::default() };
    let mut trainer = Trainer::new(Model::new(cfg, seed)?, tc.clone())?;
    let t0 = Instant::now();
    let every = (iters / 10).max(1);
    let mut done = 0;
    while done < iters {
        done = (done + every).min(iters);
        trainer.cfg.stop_after = Some(done);
        let s = trainer.run(&train_store)?;
        let r = evaluate(&trainer.model, &train_store, &EvalConfig::default())?;
        println!(
            "iter {done:5} loss {:.5} train mse {:.4} ssim {:.3} t {:.0}s",
            s.records.last().map_or(f64::NAN, |r| r.loss),
            r.aggregate.mse,
            r.aggregate.ssim,
            t0.elapsed().as_secs_f64()
        );
    }
    if use_dcb {
        let c = attention_contrast(&trainer.model, &train_store, 1)?;
        let wins = c.iter().filter(|a| a.occupied > a.background).count();
        println!("attention occupied > background in {wins}/{} steps", c.len());
    }
    println!("val loss {:.5}", validation_loss(&trainer.model, &val_store, 8, 1.0, 1.0)?);
    Ok(())
}
