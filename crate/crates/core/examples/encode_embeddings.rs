//! Fit each built-in encoder on a synthetic corpus and store the embeddings as RCDE files.

#[path = "support/mod.rs"]
mod support;

use rcdm::encoders::ENCODER_NAMES;
use rcdm::rcde::{load_embeddings, save_embeddings};
use rcdm::synthdata::{attribute_table, sample_dataset};
use rcdm::{EmbeddingMatrix, EncoderSpec, Tensor3};

fn main() -> support::Result<()> {
    let samples = sample_dataset(300, 1)?;
    let images: Vec<Tensor3> = samples.iter().map(|s| s.image.clone()).collect();
    let dir = support::out_dir("encode_embeddings")?;
    for name in ENCODER_NAMES {
        let encoder = EncoderSpec::fit_by_name(name, &images, 0)?.instantiate();
        let vectors = encoder.encode_all(&images)?;
        let matrix = EmbeddingMatrix::from_vectors(&vectors, Some(attribute_table(&samples)?), name)?;
        let path = save_embeddings(&matrix, dir.join(format!("{name}.rcde")))?;
        let back = load_embeddings(&path)?;
        assert_eq!(back, matrix);
        let norm = vectors.iter().map(|v| v.norm()).sum::<f64>() / vectors.len() as f64;
        println!("{name:<18} d = {:<4} mean |C| = {norm:7.3}  -> {}", matrix.dim(), path.display());
    }
    Ok(())
}
