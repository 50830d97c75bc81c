//! Edits on conditioning vectors: perturbation, interpolation, attribute edits and PCA directions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingMatrix, RepresentationVector};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::symmetric_eigen;
use crate::nn::scalar::{gemm, Mat};

/// Strength preset for PCA direction edits.
pub const DEFAULT_DIRECTION_SCALE: f64 = -25.0;

/// Eigenvalues below this fraction of the mean squared entry count as zero when ranking the covariance.
const RANK_TOLERANCE: f64 = 1e-10;
/// Tolerance used when validating persisted banks.
const BANK_TOLERANCE: f64 = 1e-6;

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// `C + lambda * noise`, coordinate-wise.
pub fn perturb(c: &RepresentationVector, lambda: f64, noise: &[f64]) -> Result<RepresentationVector> {
    check_dims(c.dim(), noise.len())?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("perturbation strength must be finite and >= 0, got {lambda}")));
    }
    let values = c.values().iter().zip(noise).map(|(x, n)| x + lambda * n).collect();
    RepresentationVector::new(values, format!("perturb({}, lambda={lambda})", c.source()))
}

/// Standard-normal noise of length `dim`, reproducible from `seed`.
pub fn gaussian_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// [`perturb`] with noise drawn from `seed`.
pub fn perturb_seeded(c: &RepresentationVector, lambda: f64, seed: u64) -> Result<RepresentationVector> {
    let out = perturb(c, lambda, &gaussian_noise(c.dim(), seed))?;
    let tag = format!("{}, noise_seed={seed}", out.source().trim_end_matches(')'));
    Ok(out.with_source(format!("{tag})")))
}

/// Weights `(w, 1 - w)` for `alpha`, chosen so that swapping the endpoints and using `1 - alpha`
/// yields exactly the swapped pair.
fn interpolation_weights(alpha: f64) -> (f64, f64) {
    // Iterating x -> 1 - x in floating point settles into a 2-cycle within a few steps.
    let mut xs = vec![alpha, 1.0 - alpha];
    let mut k = 0;
    loop {
        while xs.len() < k + 3 {
            let last = xs[xs.len() - 1];
            xs.push(1.0 - last);
        }
        if xs[k + 2] == xs[k] || k >= 16 {
            return (xs[k], xs[k + 1]);
        }
        k += 2;
    }
}

/// `alpha * c1 + (1 - alpha) * c2`; values of `alpha` outside `[0, 1]` extrapolate.
pub fn interpolate(c1: &RepresentationVector, c2: &RepresentationVector, alpha: f64) -> Result<RepresentationVector> {
    check_dims(c1.dim(), c2.dim())?;
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("interpolation weight must be finite, got {alpha}")));
    }
    let (w1, w2) = interpolation_weights(alpha);
    let values = c1.values().iter().zip(c2.values()).map(|(a, b)| w1 * a + w2 * b).collect();
    let extrapolated = if (0.0..=1.0).contains(&alpha) { "" } else { ", extrapolated" };
    RepresentationVector::new(
        values,
        format!("interpolate({}, {}, alpha={alpha}{extrapolated})", c1.source(), c2.source()),
    )
}

/// Unit-L2 copy of `c`.
pub fn normalize(c: &RepresentationVector) -> Result<RepresentationVector> {
    let norm = c.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument("cannot normalize a zero vector".into()));
    }
    let values = c.values().iter().map(|v| v / norm).collect();
    RepresentationVector::new(values, format!("normalize({})", c.source()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    Pca,
    AttributeMean,
    AttributeDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDirection {
    pub vector: Vec<f64>,
    pub kind: DirectionKind,
    /// 1-based principal component index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explained_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
}

impl SemanticDirection {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    fn label(&self) -> String {
        match (self.kind, self.component_index, &self.attribute) {
            (DirectionKind::Pca, Some(k), _) => format!("pc{k}"),
            (DirectionKind::AttributeMean, _, Some(a)) => format!("mean[{a}]"),
            (DirectionKind::AttributeDiff, _, Some(a)) => format!("diff[{a}]"),
            _ => "direction".into(),
        }
    }
}

/// PCA directions of an embedding matrix, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionBank {
    pub mean: Vec<f64>,
    pub total_variance: f64,
    pub directions: Vec<SemanticDirection>,
}

impl DirectionBank {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// The `k`-th component, counting from 1.
    pub fn component(&self, k: usize) -> Result<&SemanticDirection> {
        k.checked_sub(1).and_then(|i| self.directions.get(i)).ok_or_else(|| {
            Error::InvalidArgument(format!("component {k} out of range 1..={}", self.directions.len()))
        })
    }

    /// Checks every structural invariant of a bank.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidArgument("direction bank has an empty mean".into()));
        }
        if !self.total_variance.is_finite() || self.total_variance < 0.0 {
            return Err(Error::InvalidArgument("total_variance must be finite and >= 0".into()));
        }
        let mut explained = 0.0;
        for (i, dir) in self.directions.iter().enumerate() {
            check_dims(d, dir.dim())?;
            let bad = |msg: &str| Err(Error::InvalidArgument(format!("direction {}: {msg}", i + 1)));
            if dir.kind != DirectionKind::Pca {
                return bad("bank directions must be principal components");
            }
            if dir.component_index != Some(i + 1) {
                return bad("component_index must count up from 1");
            }
            let ev = match dir.explained_variance {
                Some(ev) if ev.is_finite() && ev >= 0.0 => ev,
                _ => return bad("explained_variance must be finite and >= 0"),
            };
            let norm = dot(&dir.vector, &dir.vector).sqrt();
            if (norm - 1.0).abs() > BANK_TOLERANCE {
                return bad("vector is not unit length");
            }
            if i > 0 && ev > self.directions[i - 1].explained_variance.unwrap_or(f64::INFINITY) {
                return bad("directions are not ordered by explained variance");
            }
            for other in &self.directions[..i] {
                if dot(&dir.vector, &other.vector).abs() > BANK_TOLERANCE {
                    return bad("vector is not orthogonal to earlier directions");
                }
            }
            explained += ev;
        }
        if explained > self.total_variance + BANK_TOLERANCE {
            return Err(Error::InvalidArgument("explained variance exceeds total variance".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("direction bank JSON: {e}")))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows_f64(matrix: &EmbeddingMatrix) -> Vec<f64> {
    matrix.values().iter().map(|&v| v as f64).collect()
}

fn column_mean(values: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for row in values.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    mean
}

/// Flips `v` so its largest-magnitude coordinate is positive (first one on ties).
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top `num_components` eigenvectors of the sample covariance (divisor `n - 1`) of the centered rows.
pub fn fit_pca_directions(matrix: &EmbeddingMatrix, num_components: usize) -> Result<DirectionBank> {
    fit_pca_rows(rows_f64(matrix), matrix.rows(), matrix.dim(), num_components)
}

/// [`fit_pca_directions`] on `n` row-major f64 rows of length `d`.
pub fn fit_pca_rows(mut x: Vec<f64>, n: usize, d: usize, num_components: usize) -> Result<DirectionBank> {
    check_dims(n * d, x.len())?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if num_components == 0 || num_components > (n - 1).min(d) {
        return Err(Error::InvalidArgument(format!(
            "num_components must be in 1..={}, got {num_components}",
            (n - 1).min(d)
        )));
    }
    let scale = x.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    let mean = column_mean(&x, n, d);
    for row in x.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = vec![0.0; d * d];
    gemm(Mat::new(&x, n, d).t(), Mat::new(&x, n, d), 0.0, &mut cov);
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = 0.5 * (cov[i * d + j] + cov[j * d + i]) / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let eig = symmetric_eigen(&cov, d);
    let tolerance = RANK_TOLERANCE * scale.max(f64::MIN_POSITIVE);
    let rank = eig.values.iter().filter(|&&v| v > tolerance).count();
    if num_components > rank {
        return Err(Error::DegenerateCovariance { requested: num_components, rank });
    }
    let directions = eig
        .values
        .iter()
        .zip(eig.vectors)
        .rev()
        .take(num_components)
        .enumerate()
        .map(|(i, (&value, mut vector))| {
            canonical_sign(&mut vector);
            SemanticDirection {
                vector,
                kind: DirectionKind::Pca,
                component_index: Some(i + 1),
                explained_variance: Some(value.max(0.0)),
                attribute: None,
                sample_count: Some(n),
            }
        })
        .collect();
    Ok(DirectionBank { mean, total_variance, directions })
}

/// `C + alpha * direction`, coordinate-wise.
pub fn apply_direction(c: &RepresentationVector, direction: &SemanticDirection, alpha: f64) -> Result<RepresentationVector> {
    check_dims(c.dim(), direction.dim())?;
    let values = c.values().iter().zip(&direction.vector).map(|(x, v)| x + alpha * v).collect();
    RepresentationVector::new(values, format!("apply({}, {}, alpha={alpha})", c.source(), direction.label()))
}

fn class_means(matrix: &EmbeddingMatrix, attribute: &str) -> Result<(Vec<f64>, usize, Vec<f64>, usize)> {
    let labels = matrix.attribute(attribute)?;
    let d = matrix.dim();
    let (mut pos, mut neg) = (vec![0.0; d], vec![0.0; d]);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for (i, &label) in labels.iter().enumerate() {
        let (acc, count) = if is_positive(label) { (&mut pos, &mut n_pos) } else { (&mut neg, &mut n_neg) };
        for (a, &v) in acc.iter_mut().zip(matrix.row_values(i)) {
            *a += v as f64;
        }
        *count += 1;
    }
    pos.iter_mut().for_each(|v| *v /= n_pos.max(1) as f64);
    neg.iter_mut().for_each(|v| *v /= n_neg.max(1) as f64);
    Ok((pos, n_pos, neg, n_neg))
}

/// Label values above one half count as the positive class.
pub fn is_positive(label: f64) -> bool {
    label > 0.5
}

/// Mean of the rows whose `attribute` label is positive, as a direction.
pub fn attribute_mean_direction(matrix: &EmbeddingMatrix, attribute: &str) -> Result<SemanticDirection> {
    let (pos, n_pos, _, _) = class_means(matrix, attribute)?;
    if n_pos == 0 {
        return Err(Error::EmptyClass { attribute: attribute.into(), class: "positive" });
    }
    Ok(SemanticDirection {
        vector: pos,
        kind: DirectionKind::AttributeMean,
        component_index: None,
        explained_variance: None,
        attribute: Some(attribute.into()),
        sample_count: Some(n_pos),
    })
}

/// `C + scale * mean(positive rows)`; the source tag records the positive-row count.
pub fn attribute_mean_edit(
    c: &RepresentationVector,
    matrix: &EmbeddingMatrix,
    attribute: &str,
    scale: f64,
) -> Result<RepresentationVector> {
    check_dims(matrix.dim(), c.dim())?;
    let direction = attribute_mean_direction(matrix, attribute)?;
    let values = c.values().iter().zip(&direction.vector).map(|(x, m)| x + scale * m).collect();
    let count = direction.sample_count.unwrap_or(0);
    RepresentationVector::new(
        values,
        format!("attribute_mean({}, {attribute}, positives={count}, scale={scale})", c.source()),
    )
}

/// `mean(positive rows) - mean(negative rows)`, not normalized.
pub fn attribute_diff_direction(matrix: &EmbeddingMatrix, attribute: &str) -> Result<SemanticDirection> {
    let (pos, n_pos, neg, n_neg) = class_means(matrix, attribute)?;
    if n_pos == 0 {
        return Err(Error::EmptyClass { attribute: attribute.into(), class: "positive" });
    }
    if n_neg == 0 {
        return Err(Error::EmptyClass { attribute: attribute.into(), class: "negative" });
    }
    Ok(SemanticDirection {
        vector: pos.iter().zip(&neg).map(|(p, q)| p - q).collect(),
        kind: DirectionKind::AttributeDiff,
        component_index: None,
        explained_variance: None,
        attribute: Some(attribute.into()),
        sample_count: Some(n_pos + n_neg),
    })
}

/// How a supervised attribute edit moves `C`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeMode {
    /// Add the mean of the positive rows.
    #[default]
    MeanAdd,
    /// Add the positive-minus-negative mean difference.
    Diff,
}

impl std::str::FromStr for AttributeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-add" => Ok(Self::MeanAdd),
            "diff" => Ok(Self::Diff),
            other => Err(Error::InvalidArgument(format!("unknown attribute mode {other:?}; expected mean-add or diff"))),
        }
    }
}

/// Supervised edit of `C` along `attribute`, scaled by `scale`.
pub fn attribute_edit(
    c: &RepresentationVector,
    matrix: &EmbeddingMatrix,
    attribute: &str,
    scale: f64,
    mode: AttributeMode,
) -> Result<RepresentationVector> {
    match mode {
        AttributeMode::MeanAdd => attribute_mean_edit(c, matrix, attribute, scale),
        AttributeMode::Diff => {
            check_dims(matrix.dim(), c.dim())?;
            apply_direction(c, &attribute_diff_direction(matrix, attribute)?, scale)
        }
    }
}
