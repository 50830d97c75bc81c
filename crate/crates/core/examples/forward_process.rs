//! Noise one image along the forward process and undo a single jump with the DDIM update.

#[path = "support/mod.rs"]
mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcdm::diffusion::{ddim_step, gaussian, DiffusionSample};
use rcdm::io::{grid, save_png};
use rcdm::synthdata::sample_dataset;
use rcdm::{forward_sample, NoiseSchedule};

fn main() -> support::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let image = sample_dataset(1, 3)?.remove(0).image;
    let x0 = DiffusionSample::clean(image.to_model_range());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cells = vec![image.clone()];
    for t in [50, 150, 300, 500, 750, 1000] {
        let eps = gaussian([3, 32, 32], &mut rng);
        let x_t = forward_sample(&x0, t, &schedule, &eps)?;
        // With the true noise, one DDIM jump to t = 0 recovers x0 exactly (up to rounding).
        let back = ddim_step(&x_t, &eps, &schedule, 0)?;
        let err = back.data.data().iter().zip(x0.data.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("t = {t:4}  alpha_bar = {:.5}  inversion error {err:.1e}", schedule.alpha_bar(t));
        cells.push(x_t.data.to_unit_range());
    }
    let path = support::out_dir("forward_process")?.join("noising.png");
    save_png(&grid(&cells)?, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
