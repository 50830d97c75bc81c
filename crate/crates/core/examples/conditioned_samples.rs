//! Condition on held-out images and check that generations share their hue.
//!
//! ```text
//! cargo run --release --example conditioned_samples -- toy.ckpt
//! ```
//! Writes `references.png` and `samples.png`, cell for cell.

#[path = "support/mod.rs"]
mod support;

use rcdm::io::{grid, save_png};
use rcdm::synthdata::{probe, sample_dataset, HUE_NAMES};
use rcdm::{sample_batch, RepresentationVector, SamplingOptions};

fn main() -> support::Result<()> {
    let ckpt = support::checkpoint_from_args()?;
    let (net, schedule) = (ckpt.denoiser()?, ckpt.schedule()?);
    let encoder = ckpt.encoder().ok_or("checkpoint has no built-in encoder")?;
    let refs = sample_dataset(10, 4242)?;
    let conditions: Vec<RepresentationVector> = refs.iter().map(|s| encoder.encode(&s.image)).collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = (0..refs.len() as u64).collect();
    let samples = sample_batch(&net, &conditions.iter().collect::<Vec<_>>(), &schedule, SamplingOptions::default(), &seeds)?;
    let mut agree = 0;
    for (r, s) in refs.iter().zip(&samples) {
        let got = probe(&s.data.to_unit_range()).map(|p| HUE_NAMES[p.hue_index]).unwrap_or("blank");
        agree += usize::from(got == HUE_NAMES[r.factors.hue_index]);
        println!("reference {:<5} -> sample {got}", HUE_NAMES[r.factors.hue_index]);
    }
    println!("hue agreement {agree}/{}", refs.len());
    let dir = support::out_dir("conditioned_samples")?;
    save_png(&grid(&refs.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?, &dir.join("references.png"))?;
    save_png(&grid(&samples.iter().map(|s| s.data.to_unit_range()).collect::<Vec<_>>())?, &dir.join("samples.png"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
