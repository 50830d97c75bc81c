//! Conditioning vectors and the encoders that produce them.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Side length of the grid `pixel_stats` pools images down to.
pub const POOL_GRID: usize = 8;
/// Output dimension of the `random_projection` encoder.
pub const RANDOM_PROJECTION_DIM: usize = 32;
/// Dimension of the self-supervised ViT embeddings the file route is meant for.
pub const EXTERNAL_EMBEDDING_DIM: usize = 768;

/// A conditioning vector `C` with a provenance tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationVector {
    values: Vec<f64>,
    source: String,
}

impl RepresentationVector {
    pub fn new(values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("representation must have dim >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("representation entry {i} is not finite")));
        }
        Ok(Self { values, source: source.into() })
    }

    pub fn zeros(dim: usize, source: impl Into<String>) -> Result<Self> {
        Self::new(vec![0.0; dim], source)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Per-row attribute values keyed by attribute name.
pub type LabelMap = BTreeMap<String, Vec<f64>>;

/// `n` representations of common dimension `d`, stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    labels: Option<LabelMap>,
    source: String,
}

impl EmbeddingMatrix {
    pub fn new(
        rows: usize,
        dim: usize,
        values: Vec<f32>,
        labels: Option<LabelMap>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be at least 1".into()));
        }
        if values.len() != rows * dim {
            return Err(Error::Shape { expected: vec![rows, dim], got: vec![values.len()] });
        }
        if let Some(labels) = &labels {
            for (name, column) in labels {
                if column.len() != rows {
                    return Err(Error::InvalidArgument(format!(
                        "label {name:?} has {} values for {rows} rows",
                        column.len()
                    )));
                }
            }
        }
        Ok(Self { rows, dim, values, labels, source: source.into() })
    }

    /// Stacks vectors of equal dimension; values are stored at `f32` precision.
    pub fn from_vectors(
        vectors: &[RepresentationVector],
        labels: Option<LabelMap>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let dim = vectors.first().map(RepresentationVector::dim).unwrap_or(1);
        let mut values = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            if v.dim() != dim {
                return Err(Error::Dimension { expected: dim, got: v.dim() });
            }
            values.extend(v.values().iter().map(|&x| x as f32));
        }
        Self::new(vectors.len(), dim, values, labels, source)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row_values(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row(&self, i: usize) -> Result<RepresentationVector> {
        if i >= self.rows {
            return Err(Error::InvalidArgument(format!("row {i} out of range for {} rows", self.rows)));
        }
        RepresentationVector::new(
            self.row_values(i).iter().map(|&v| v as f64).collect(),
            format!("{}#{i}", self.source),
        )
    }

    pub fn labels(&self) -> Option<&LabelMap> {
        self.labels.as_ref()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.labels.as_ref().map(|l| l.keys().cloned().collect()).unwrap_or_default()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Values of one label column, or an error listing the known attributes.
    pub fn attribute(&self, name: &str) -> Result<&[f64]> {
        self.labels
            .as_ref()
            .and_then(|l| l.get(name))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownAttribute { name: name.into(), available: self.attribute_names() })
    }
}

/// Serializable description of an encoder, including any fitted statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Average-pool to 8x8, flatten channel-major, subtract the corpus mean and divide by the
    /// per-coordinate corpus standard deviation.
    PixelStats { channels: usize, size: usize, mean: Vec<f64>, std: Vec<f64> },
    /// Fixed seeded Gaussian projection of the flattened pixels.
    RandomProjection { channels: usize, size: usize, dim: usize, seed: u64 },
    /// Pooled pixels projected on corpus principal components, whitened per component.
    PcaProjection { channels: usize, size: usize, mean: Vec<f64>, components: Vec<Vec<f64>>, scales: Vec<f64> },
}

/// Default encoder specs for images of the given geometry (unfitted statistics are identity).
pub fn built_in_encoders(channels: usize, size: usize) -> Vec<EncoderSpec> {
    let pooled = channels * POOL_GRID * POOL_GRID;
    vec![
        EncoderSpec::PixelStats { channels, size, mean: vec![0.0; pooled], std: vec![1.0; pooled] },
        EncoderSpec::RandomProjection { channels, size, dim: RANDOM_PROJECTION_DIM, seed: 0 },
    ]
}

/// Names accepted by [`EncoderSpec::fit_by_name`].
pub const ENCODER_NAMES: [&str; 3] = ["pixel_stats", "random_projection", "pca_projection"];

/// Channel-major average pooling to a `POOL_GRID x POOL_GRID` grid.
pub fn pool_image(image: &Tensor3) -> Result<Vec<f64>> {
    let [c, h, w] = image.shape();
    if h != w || h < POOL_GRID || h % POOL_GRID != 0 {
        return Err(Error::Shape { expected: vec![c, POOL_GRID, POOL_GRID], got: vec![c, h, w] });
    }
    let f = h / POOL_GRID;
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * POOL_GRID * POOL_GRID];
    for ci in 0..c {
        for gy in 0..POOL_GRID {
            for gx in 0..POOL_GRID {
                let mut acc = 0.0;
                for y in gy * f..(gy + 1) * f {
                    for x in gx * f..(gx + 1) * f {
                        acc += image.at(ci, y, x);
                    }
                }
                out[(ci * POOL_GRID + gy) * POOL_GRID + gx] = acc * norm;
            }
        }
    }
    Ok(out)
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-6 { s } else { 1.0 }).collect();
    (mean, std)
}

impl EncoderSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PixelStats { .. } => "pixel_stats",
            Self::RandomProjection { .. } => "random_projection",
            Self::PcaProjection { .. } => "pca_projection",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::PixelStats { mean, .. } => mean.len(),
            Self::RandomProjection { dim, .. } => *dim,
            Self::PcaProjection { components, .. } => components.len(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Self::PixelStats { channels, size, .. }
            | Self::RandomProjection { channels, size, .. }
            | Self::PcaProjection { channels, size, .. } => [*channels, *size, *size],
        }
    }

    /// `pixel_stats` with centering/whitening statistics taken from `corpus`.
    pub fn fit_pixel_stats(corpus: &[Tensor3]) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
        let [channels, size, _] = first.shape();
        let pooled = corpus.iter().map(pool_image).collect::<Result<Vec<_>>>()?;
        let (mean, std) = column_stats(&pooled);
        Ok(Self::PixelStats { channels, size, mean, std })
    }

    /// `pca_projection` keeping the top `dim` components of the pooled corpus.
    pub fn fit_pca_projection(corpus: &[Tensor3], dim: usize) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
        let [channels, size, _] = first.shape();
        let pooled = corpus.iter().map(pool_image).collect::<Result<Vec<_>>>()?;
        let d = pooled[0].len();
        let bank = crate::toolkit::fit_pca_rows(pooled.concat(), pooled.len(), d, dim)?;
        let components = bank.directions.iter().map(|dir| dir.vector.clone()).collect();
        let scales = bank
            .directions
            .iter()
            .map(|dir| dir.explained_variance.unwrap_or(1.0).sqrt().max(1e-6))
            .collect();
        Ok(Self::PcaProjection { channels, size, mean: bank.mean, components, scales })
    }

    /// Builds the named encoder, fitting statistics on `corpus` where the encoder needs them.
    pub fn fit_by_name(name: &str, corpus: &[Tensor3], seed: u64) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
        let [channels, size, _] = first.shape();
        match name {
            "pixel_stats" => Self::fit_pixel_stats(corpus),
            "random_projection" => {
                Ok(Self::RandomProjection { channels, size, dim: RANDOM_PROJECTION_DIM, seed })
            }
            "pca_projection" => Self::fit_pca_projection(corpus, RANDOM_PROJECTION_DIM.min(corpus.len() - 1)),
            other => Err(Error::InvalidArgument(format!(
                "unknown encoder {other:?}; built-in encoders: {}",
                ENCODER_NAMES.join(", ")
            ))),
        }
    }

    /// Materializes the encoder (e.g. draws the projection matrix) for repeated use.
    pub fn instantiate(&self) -> Encoder {
        let projection = match self {
            Self::RandomProjection { channels, size, dim, seed } => {
                let n_in = channels * size * size;
                let scale = 1.0 / (n_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..dim * n_in).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()
            }
            _ => Vec::new(),
        };
        Encoder { spec: self.clone(), projection }
    }
}

/// An [`EncoderSpec`] ready to encode images.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    /// Row-major `dim x inputs` matrix for the random projection.
    projection: Vec<f64>,
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Column `i` of the random projection matrix.
    pub fn projection_column(&self, i: usize) -> Option<Vec<f64>> {
        let n_in = self.spec.input_shape().iter().product::<usize>();
        (!self.projection.is_empty() && i < n_in)
            .then(|| (0..self.dim()).map(|r| self.projection[r * n_in + i]).collect())
    }

    pub fn encode(&self, image: &Tensor3) -> Result<RepresentationVector> {
        let expected = self.spec.input_shape();
        if image.shape() != expected {
            return Err(Error::Shape { expected: expected.to_vec(), got: image.shape().to_vec() });
        }
        let values = match &self.spec {
            EncoderSpec::PixelStats { mean, std, .. } => pool_image(image)?
                .into_iter()
                .zip(mean.iter().zip(std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
            EncoderSpec::RandomProjection { .. } => {
                let x = image.data();
                self.projection.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
            }
            EncoderSpec::PcaProjection { mean, components, scales, .. } => {
                let centered: Vec<f64> = pool_image(image)?.iter().zip(mean).map(|(v, m)| v - m).collect();
                components
                    .iter()
                    .zip(scales)
                    .map(|(c, s)| c.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>() / s)
                    .collect()
            }
        };
        RepresentationVector::new(values, self.spec.name())
    }

    pub fn encode_all(&self, images: &[Tensor3]) -> Result<Vec<RepresentationVector>> {
        images.iter().map(|im| self.encode(im)).collect()
    }
}

/// One-shot encode; prefer [`EncoderSpec::instantiate`] for many images.
pub fn encode(spec: &EncoderSpec, image: &Tensor3) -> Result<RepresentationVector> {
    spec.instantiate().encode(image)
}
