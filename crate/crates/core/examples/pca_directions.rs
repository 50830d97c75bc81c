//! Find principal directions of the embedding space and push one reference along each.
//!
//! ```text
//! cargo run --release --example pca_directions -- toy.ckpt
//! ```

#[path = "support/mod.rs"]
mod support;

use rcdm::io::{grid, save_png};
use rcdm::synthdata::{probe, sample_dataset, HUE_NAMES};
use rcdm::toolkit::{apply_direction, fit_pca_directions, DEFAULT_DIRECTION_SCALE};
use rcdm::{sample, EmbeddingMatrix, RepresentationVector, Sampler};

fn main() -> support::Result<()> {
    let ckpt = support::checkpoint_from_args()?;
    let (net, schedule) = (ckpt.denoiser()?, ckpt.schedule()?);
    let encoder = ckpt.encoder().ok_or("checkpoint has no built-in encoder")?;
    let corpus = sample_dataset(1000, 0)?;
    let vectors: Vec<RepresentationVector> = corpus.iter().map(|s| encoder.encode(&s.image)).collect::<Result<_, _>>()?;
    let bank = fit_pca_directions(&EmbeddingMatrix::from_vectors(&vectors, None, "corpus")?, 5)?;
    bank.save(support::out_dir("pca_directions")?.join("bank.json"))?;

    let reference = sample_dataset(1, 99)?.remove(0);
    let c = encoder.encode(&reference.image)?;
    let describe = |image: &rcdm::Tensor3| match probe(image) {
        Ok(p) => format!("{} at ({:.2}, {:.2}) size {:.2}", HUE_NAMES[p.hue_index], p.x, p.y, p.size),
        Err(_) => "no shape".into(),
    };
    let plain = sample(&net, &c, &schedule, Sampler::Ddim, 50, 0)?.data.to_unit_range();
    println!("unedited: {}", describe(&plain));
    let mut cells = vec![reference.image.clone(), plain];
    for k in 1..=bank.len() {
        let direction = bank.component(k)?;
        let share = 100.0 * direction.explained_variance.unwrap_or(0.0) / bank.total_variance;
        let out = sample(&net, &apply_direction(&c, direction, DEFAULT_DIRECTION_SCALE)?, &schedule, Sampler::Ddim, 50, 0)?;
        let image = out.data.to_unit_range();
        println!("V{k} ({share:4.1}% of variance), alpha {DEFAULT_DIRECTION_SCALE}: {}", describe(&image));
        cells.push(image);
    }
    let path = support::out_dir("pca_directions")?.join("edits.png");
    save_png(&grid(&cells)?, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
