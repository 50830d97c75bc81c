//! Train the toy model described by `configs/toy.json` on 5,000 synthetic images.
//!
//! ```text
//! cargo run --release --example train_toy -- toy.ckpt [epochs]
//! ```
//! Takes roughly a minute per epoch on one core. A checkpoint is written after every epoch.

use std::time::Instant;

use rcdm::synthdata::sample_dataset;
use rcdm::trainer::{smoothed, TrainingSet, LOSS_SMOOTHING_WINDOW};
use rcdm::{DenoiserConfig, TrainConfig, Trainer};
use serde::Deserialize;

#[derive(Deserialize)]
struct RunConfig {
    model: DenoiserConfig,
    train: TrainConfig,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toy.ckpt".into());
    let mut config: RunConfig = serde_json::from_str(include_str!("../../../configs/toy.json"))?;
    if let Some(epochs) = args.next() {
        config.train.epochs = epochs.parse()?;
    }
    let images = sample_dataset(5000, 0)?.into_iter().map(|s| s.image).collect();
    let data = TrainingSet::prepare(&config.train.conditions, images, config.train.seed)?;
    let start = Instant::now();
    let ckpt = Trainer::new(config.train, &config.model)?.fit(&data, Some(out.as_ref()), |r| {
        println!("epoch {:3}  step {:6}  loss {:.4}  {:.0?}", r.epoch, r.step, r.mean_loss, start.elapsed());
    })?;
    let curve = smoothed(&ckpt.loss_history, LOSS_SMOOTHING_WINDOW);
    println!("smoothed loss {:.4} -> {:.4}; wrote {out}", curve[LOSS_SMOOTHING_WINDOW - 1], curve[curve.len() - 1]);
    Ok(())
}
