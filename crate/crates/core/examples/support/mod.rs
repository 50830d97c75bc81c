//! Shared plumbing for the examples: argument handling and a fallback model.
#![allow(dead_code)]

use std::path::PathBuf;

use rcdm::synthdata::sample_dataset;
use rcdm::trainer::TrainingSet;
use rcdm::{load_checkpoint, Checkpoint, DenoiserConfig, TrainConfig, Trainer};

pub type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Output directory from `RCDM_EXAMPLE_OUT`, defaulting to a temp subdirectory.
pub fn out_dir(name: &str) -> Result<PathBuf> {
    let dir = std::env::var_os("RCDM_EXAMPLE_OUT").map(PathBuf::from).unwrap_or_else(std::env::temp_dir).join(name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// The checkpoint named by the first argument, or a deliberately tiny model trained on the spot.
///
/// The fallback takes a few seconds and its samples are blurry; train a real one with
/// `cargo run --release --example train_toy` and pass the path.
pub fn checkpoint_from_args() -> Result<Checkpoint> {
    if let Some(path) = std::env::args().nth(1) {
        return Ok(load_checkpoint(path)?);
    }
    eprintln!("no checkpoint given; training a throwaway model (pass a path for meaningful samples)");
    let samples = sample_dataset(400, 0)?;
    let model = DenoiserConfig { base_width: 8, depth: 1, time_embed_dim: 32, ..DenoiserConfig::default() };
    let mut config = TrainConfig::new(1, 16);
    config.learning_rate = 1e-3;
    let data = TrainingSet::prepare(&config.conditions, samples.into_iter().map(|s| s.image).collect(), 0)?;
    Ok(Trainer::new(config, &model)?.fit(&data, None, |_| {})?)
}
