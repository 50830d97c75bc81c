//! Interpolate between two references that differ only in horizontal position.
//!
//! ```text
//! cargo run --release --example interpolation_sweep -- toy.ckpt
//! ```

#[path = "support/mod.rs"]
mod support;

use rcdm::io::{grid, save_png};
use rcdm::synthdata::{probe, render, FactorSpec, Shape};
use rcdm::toolkit::interpolate;
use rcdm::{sample_batch, RepresentationVector, SamplingOptions};

fn main() -> support::Result<()> {
    let ckpt = support::checkpoint_from_args()?;
    let (net, schedule) = (ckpt.denoiser()?, ckpt.schedule()?);
    let encoder = ckpt.encoder().ok_or("checkpoint has no built-in encoder")?;
    let left = FactorSpec { shape: Shape::Disc, hue_index: 2, x: 0.25, y: 0.5, size: 0.22, background: 0.15 };
    let right = FactorSpec { x: 0.75, ..left };
    let (a, b) = (render(&left)?, render(&right)?);
    let (ca, cb) = (encoder.encode(&a.image)?, encoder.encode(&b.image)?);
    let alphas: Vec<f64> = (0..=10).map(|k| 1.0 - k as f64 / 10.0).collect();
    let cells: Vec<RepresentationVector> = alphas.iter().map(|&al| interpolate(&ca, &cb, al)).collect::<Result<_, _>>()?;
    let samples = sample_batch(&net, &cells.iter().collect::<Vec<_>>(), &schedule, SamplingOptions::default(), &[3; 11])?;
    let mut images = vec![a.image.clone()];
    for (alpha, s) in alphas.iter().zip(&samples) {
        let image = s.data.to_unit_range();
        match probe(&image) {
            Ok(p) => println!("alpha {alpha:.1}: probed x {:.3}", p.x),
            Err(_) => println!("alpha {alpha:.1}: no shape found"),
        }
        images.push(image);
    }
    images.push(b.image.clone());
    let path = support::out_dir("interpolation_sweep")?.join("sweep.png");
    save_png(&grid(&images)?, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
