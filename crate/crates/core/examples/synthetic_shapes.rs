//! Render a small synthetic dataset, read every factor back with the probe, and export it.
//!
//! ```text
//! cargo run --release --example synthetic_shapes
//! ```

#[path = "support/mod.rs"]
mod support;

use rcdm::synthdata::{export_dataset, probe, sample_dataset, HUE_NAMES};

fn main() -> support::Result<()> {
    let samples = sample_dataset(12, 7)?;
    for (i, s) in samples.iter().enumerate() {
        let f = s.factors;
        let r = probe(&s.image)?;
        println!(
            "#{i:02} {:?} {:<5} at ({:.2}, {:.2}) size {:.2} -> probe {:<5} at ({:.2}, {:.2}) size {:.2}",
            f.shape, HUE_NAMES[f.hue_index], f.x, f.y, f.size, HUE_NAMES[r.hue_index], r.x, r.y, r.raw_size
        );
    }
    let manifest = export_dataset(&samples, support::out_dir("synthetic_shapes")?)?;
    println!("wrote {}", manifest.display());
    Ok(())
}
