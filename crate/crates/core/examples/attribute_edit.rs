//! Make shapes red by adding the mean representation of red training images.
//!
//! ```text
//! cargo run --release --example attribute_edit -- toy.ckpt
//! ```

#[path = "support/mod.rs"]
mod support;

use rcdm::io::{grid, save_png};
use rcdm::synthdata::{attribute_table, probe, sample_dataset, HUE_NAMES};
use rcdm::toolkit::attribute_edit;
use rcdm::{sample_batch, AttributeMode, EmbeddingMatrix, RepresentationVector, SamplingOptions};

fn main() -> support::Result<()> {
    let ckpt = support::checkpoint_from_args()?;
    let (net, schedule) = (ckpt.denoiser()?, ckpt.schedule()?);
    let encoder = ckpt.encoder().ok_or("checkpoint has no built-in encoder")?;
    let corpus = sample_dataset(2000, 0)?;
    let vectors: Vec<RepresentationVector> = corpus.iter().map(|s| encoder.encode(&s.image)).collect::<Result<_, _>>()?;
    let labelled = EmbeddingMatrix::from_vectors(&vectors, Some(attribute_table(&corpus)?), "corpus")?;

    let refs: Vec<_> = sample_dataset(40, 5)?.into_iter().filter(|s| s.factors.hue_index != 0).take(8).collect();
    let dir = support::out_dir("attribute_edit")?;
    save_png(&grid(&refs.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?, &dir.join("references.png"))?;
    let seeds: Vec<u64> = (0..refs.len() as u64).collect();
    for mode in [AttributeMode::MeanAdd, AttributeMode::Diff] {
        let edited: Vec<RepresentationVector> = refs
            .iter()
            .map(|s| attribute_edit(&encoder.encode(&s.image)?, &labelled, "is_red", 1.0, mode))
            .collect::<Result<_, _>>()?;
        let out = sample_batch(&net, &edited.iter().collect::<Vec<_>>(), &schedule, SamplingOptions::default(), &seeds)?;
        let images: Vec<_> = out.iter().map(|s| s.data.to_unit_range()).collect();
        let hues: Vec<&str> = images.iter().map(|i| probe(i).map(|p| HUE_NAMES[p.hue_index]).unwrap_or("blank")).collect();
        let red = hues.iter().filter(|h| **h == "red").count();
        println!("{mode:?}: {red}/{} red  {hues:?}", refs.len());
        save_png(&grid(&images)?, &dir.join(format!("{mode:?}.png").to_lowercase()))?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
