//! Add growing Gaussian noise to one representation and sample each version with the same seed.
//!
//! ```text
//! cargo run --release --example perturbation_sweep -- toy.ckpt
//! ```

#[path = "support/mod.rs"]
mod support;

use rcdm::io::{grid, save_png};
use rcdm::synthdata::{probe, sample_dataset, HUE_NAMES};
use rcdm::toolkit::perturb_seeded;
use rcdm::{sample, Sampler};

fn main() -> support::Result<()> {
    let ckpt = support::checkpoint_from_args()?;
    let (net, schedule) = (ckpt.denoiser()?, ckpt.schedule()?);
    let encoder = ckpt.encoder().ok_or("checkpoint has no built-in encoder")?;
    let reference = sample_dataset(1, 77)?.remove(0);
    let c = encoder.encode(&reference.image)?;
    println!("reference hue {}", HUE_NAMES[reference.factors.hue_index]);
    let mut cells = vec![reference.image.clone()];
    for lambda in [0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2] {
        // One noise draw, scaled: only the strength changes along the row.
        let edited = perturb_seeded(&c, lambda, 5)?;
        let out = sample(&net, &edited, &schedule, Sampler::Ddim, 50, 0)?.data.to_unit_range();
        let hue = probe(&out).map(|p| HUE_NAMES[p.hue_index]).unwrap_or("blank");
        let shift = edited.values().iter().zip(c.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!("lambda {lambda:.1}: |C' - C| = {shift:6.3}  hue {hue}");
        cells.push(out);
    }
    let path = support::out_dir("perturbation_sweep")?.join("sweep.png");
    save_png(&grid(&cells)?, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
