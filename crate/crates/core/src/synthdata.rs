//! Procedural shape images with known generative factors, and a probe that reads them back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::LabelMap;
use crate::error::{Error, Result};
use crate::io::{load_png, save_png, write_atomic};
use crate::tensor::Tensor3;

/// Rendered images are `3 x IMAGE_SIZE x IMAGE_SIZE`.
pub const IMAGE_SIZE: usize = 32;
pub const POSITION_RANGE: (f64, f64) = (0.2, 0.8);
pub const SIZE_RANGE: (f64, f64) = (0.1, 0.3);
pub const BACKGROUND_RANGE: (f64, f64) = (0.0, 0.3);
/// `is_large` holds for sizes strictly above this.
pub const LARGE_SIZE_THRESHOLD: f64 = 0.2;
/// `is_left` holds for x strictly below this.
pub const LEFT_THRESHOLD: f64 = 0.5;
/// A pixel belongs to the probe foreground when its channel spread (max - min) exceeds this.
pub const FOREGROUND_CHROMA: f64 = 0.25;
pub const ATTRIBUTE_NAMES: [&str; 5] = ["is_red", "is_green", "is_blue", "is_large", "is_left"];
pub const HUE_NAMES: [&str; 3] = ["red", "green", "blue"];
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    /// Horizontal bar, twice as wide as tall.
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Bar];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of area `size^2`.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= size * size / std::f64::consts::PI,
            Shape::Square => dx.abs() <= size / 2.0 && dy.abs() <= size / 2.0,
            Shape::Bar => {
                dx.abs() <= size * std::f64::consts::SQRT_2 / 2.0 && dy.abs() <= size / (2.0 * std::f64::consts::SQRT_2)
            }
        }
    }
}

/// Generative factors of one image. Positions and size are fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub shape: Shape,
    /// 0 red, 1 green, 2 blue.
    pub hue_index: usize,
    pub x: f64,
    pub y: f64,
    /// Square root of the shape area.
    pub size: f64,
    pub background: f64,
}

fn in_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hue_index > 2 {
            return Err(Error::InvalidArgument(format!("hue_index = {} outside 0..=2", self.hue_index)));
        }
        in_range("x", self.x, POSITION_RANGE)?;
        in_range("y", self.y, POSITION_RANGE)?;
        in_range("size", self.size, SIZE_RANGE)?;
        in_range("background", self.background, BACKGROUND_RANGE)
    }

    pub fn is_large(&self) -> bool {
        self.size > LARGE_SIZE_THRESHOLD
    }

    pub fn is_left(&self) -> bool {
        self.x < LEFT_THRESHOLD
    }

    /// Binary attribute labels, keyed by [`ATTRIBUTE_NAMES`].
    pub fn attributes(&self) -> BTreeMap<String, f64> {
        let flags = [self.hue_index == 0, self.hue_index == 1, self.hue_index == 2, self.is_large(), self.is_left()];
        ATTRIBUTE_NAMES.iter().zip(flags).map(|(n, f)| (n.to_string(), if f { 1.0 } else { 0.0 })).collect()
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..3)],
            hue_index: rng.random_range(0..3),
            x: rng.random_range(POSITION_RANGE.0..=POSITION_RANGE.1),
            y: rng.random_range(POSITION_RANGE.0..=POSITION_RANGE.1),
            size: rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1),
            background: rng.random_range(BACKGROUND_RANGE.0..=BACKGROUND_RANGE.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSample {
    pub image: Tensor3,
    pub factors: FactorSpec,
    pub attributes: BTreeMap<String, f64>,
}

/// Hard-edged rendering: a pixel is foreground exactly when its centre lies inside the shape.
pub fn render(factors: &FactorSpec) -> Result<FactorSample> {
    factors.validate()?;
    let n = IMAGE_SIZE;
    let mut image = Tensor3::filled([3, n, n], factors.background);
    for row in 0..n {
        for col in 0..n {
            let px = (col as f64 + 0.5) / n as f64;
            let py = (row as f64 + 0.5) / n as f64;
            if factors.shape.contains(px - factors.x, py - factors.y, factors.size) {
                for ch in 0..3 {
                    image.set(ch, row, col, if ch == factors.hue_index { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok(FactorSample { image, factors: *factors, attributes: factors.attributes() })
}

/// `n` samples with factors drawn uniformly from their ranges.
pub fn sample_dataset(n: usize, seed: u64) -> Result<Vec<FactorSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| render(&FactorSpec::random(&mut rng))).collect()
}

/// Factor estimates read back from an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReading {
    pub hue_index: usize,
    pub x: f64,
    pub y: f64,
    /// Clipped to the factor range; see `clipped`.
    pub size: f64,
    pub background: f64,
    /// Size before clipping.
    pub raw_size: f64,
    pub foreground_pixels: usize,
    /// Names of fields that were clipped to their factor range.
    pub clipped: Vec<String>,
}

/// Reads hue, centroid, size and background from a `3 x 32 x 32` image in `[0, 1]`.
///
/// The foreground is the set of saturated pixels (channel spread above [`FOREGROUND_CHROMA`]);
/// an image without any is reported as [`Error::BlankImage`].
pub fn probe(image: &Tensor3) -> Result<ProbeReading> {
    let expected = [3, IMAGE_SIZE, IMAGE_SIZE];
    if image.shape() != expected {
        return Err(Error::Shape { expected: expected.to_vec(), got: image.shape().to_vec() });
    }
    let n = IMAGE_SIZE;
    let (mut sums, mut sx, mut sy, mut count) = ([0.0; 3], 0.0, 0.0, 0usize);
    let mut background = Vec::new();
    for row in 0..n {
        for col in 0..n {
            let px = [image.at(0, row, col), image.at(1, row, col), image.at(2, row, col)];
            let spread = px.iter().copied().fold(f64::MIN, f64::max) - px.iter().copied().fold(f64::MAX, f64::min);
            if spread > FOREGROUND_CHROMA {
                for (s, v) in sums.iter_mut().zip(px) {
                    *s += v;
                }
                sx += col as f64 + 0.5;
                sy += row as f64 + 0.5;
                count += 1;
            } else {
                background.push(px.iter().sum::<f64>() / 3.0);
            }
        }
    }
    if count == 0 {
        return Err(Error::BlankImage);
    }
    let hue_index = (0..3).fold(0, |best, c| if sums[c] > sums[best] { c } else { best });
    let side = n as f64;
    let raw_size = (count as f64).sqrt() / side;
    let mut clipped = Vec::new();
    let mut clip = |name: &str, v: f64, (lo, hi): (f64, f64)| {
        let c = v.clamp(lo, hi);
        if c != v {
            clipped.push(name.to_string());
        }
        c
    };
    let size = clip("size", raw_size, SIZE_RANGE);
    let background = if background.is_empty() {
        clipped.push("background".into());
        0.0
    } else {
        background.sort_by(f64::total_cmp);
        clip("background", median_sorted(&background), BACKGROUND_RANGE)
    };
    Ok(ProbeReading {
        hue_index,
        x: sx / count as f64 / side,
        y: sy / count as f64 / side,
        size,
        background,
        raw_size,
        foreground_pixels: count,
        clipped,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Label columns for [`ATTRIBUTE_NAMES`], one value per sample.
pub fn attribute_table(samples: &[FactorSample]) -> Result<LabelMap> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("attribute table needs at least one sample".into()));
    }
    let mut table: LabelMap = ATTRIBUTE_NAMES.iter().map(|n| (n.to_string(), Vec::with_capacity(samples.len()))).collect();
    for s in samples {
        for (name, value) in s.factors.attributes() {
            table.get_mut(&name).expect("fixed attribute set").push(value);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub filename: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<FactorSpec>,
    #[serde(default)]
    pub attributes: BTreeMap<String, f64>,
}

pub fn sample_filename(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes one PNG per sample plus [`MANIFEST_FILE`] into `dir`.
pub fn export_dataset(samples: &[FactorSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let filename = sample_filename(i);
        save_png(&s.image, &dir.join(&filename))?;
        manifest.push(ManifestEntry { filename, factors: Some(s.factors), attributes: s.attributes.clone() });
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// PNG images of a folder, in file-name order, with labels from an optional manifest.
#[derive(Debug, Clone)]
pub struct ImageFolder {
    pub filenames: Vec<String>,
    pub images: Vec<Tensor3>,
    pub labels: Option<LabelMap>,
    /// Factors from the manifest, when every image has them.
    pub factors: Option<Vec<FactorSpec>>,
}

impl ImageFolder {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads every `*.png` in `dir`. If `manifest.json` is present, each image must have an entry and
/// every entry must carry the same attribute names.
pub fn load_image_folder(dir: impl AsRef<Path>) -> Result<ImageFolder> {
    let dir = dir.as_ref();
    let mut filenames: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|name| name.to_ascii_lowercase().ends_with(".png"))
        .collect();
    filenames.sort();
    if filenames.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG images in {}", dir.display())));
    }
    let images = filenames.iter().map(|f| load_png(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    if let Some(bad) = images.iter().find(|im| im.shape() != images[0].shape()) {
        return Err(Error::Shape { expected: images[0].shape().to_vec(), got: bad.shape().to_vec() });
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let (labels, factors) = if manifest_path.exists() {
        let by_name: BTreeMap<String, ManifestEntry> =
            read_manifest(&manifest_path)?.into_iter().map(|e| (e.filename.clone(), e)).collect();
        let entries = filenames
            .iter()
            .map(|f| {
                by_name.get(f).ok_or_else(|| Error::InvalidArgument(format!("{f} has no entry in {MANIFEST_FILE}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = entries[0].attributes.keys().cloned().collect();
        let mut labels: LabelMap = names.iter().map(|n| (n.clone(), Vec::new())).collect();
        for (entry, file) in entries.iter().zip(&filenames) {
            if entry.attributes.keys().ne(names.iter()) {
                return Err(Error::InvalidArgument(format!("{file}: attribute names differ from the first entry")));
            }
            for (name, value) in &entry.attributes {
                labels.get_mut(name).expect("same keys").push(*value);
            }
        }
        let factors = entries.iter().map(|e| e.factors).collect::<Option<Vec<_>>>();
        ((!labels.is_empty()).then_some(labels), factors)
    } else {
        (None, None)
    };
    Ok(ImageFolder { filenames, images, labels, factors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, hue: usize, x: f64, y: f64, size: f64, bg: f64) -> FactorSpec {
        FactorSpec { shape, hue_index: hue, x, y, size, background: bg }
    }

    #[test]
    fn render_examples() {
        let red = render(&spec(Shape::Disc, 0, 0.5, 0.5, 0.25, 0.0)).unwrap();
        let c = IMAGE_SIZE / 2;
        assert_eq!([red.image.at(0, c, c), red.image.at(1, c, c), red.image.at(2, c, c)], [1.0, 0.0, 0.0]);
        let again = render(&spec(Shape::Disc, 0, 0.5, 0.5, 0.25, 0.0)).unwrap();
        assert_eq!(red.image.data(), again.image.data());

        let gray = render(&spec(Shape::Square, 2, 0.5, 0.5, 0.3, 0.3)).unwrap();
        assert_eq!([gray.image.at(0, 0, 0), gray.image.at(1, 0, 0), gray.image.at(2, 0, 0)], [0.3; 3]);
        assert!(render(&spec(Shape::Bar, 3, 0.5, 0.5, 0.2, 0.0)).is_err());
        assert!(render(&spec(Shape::Bar, 0, 0.9, 0.5, 0.2, 0.0)).is_err());
    }

    #[test]
    fn shapes_cover_their_area() {
        for shape in Shape::ALL {
            let s = render(&spec(shape, 1, 0.5, 0.5, 0.3, 0.1)).unwrap();
            let r = probe(&s.image).unwrap();
            assert!((r.size - 0.3).abs() <= 1.0 / 32.0, "{shape:?}: {}", r.size);
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = sample_dataset(20, 3).unwrap();
        let b = sample_dataset(20, 3).unwrap();
        assert_eq!(a.iter().map(|s| s.factors).collect::<Vec<_>>(), b.iter().map(|s| s.factors).collect::<Vec<_>>());
        assert_eq!(sample_dataset(1, 0).unwrap().len(), 1);
        assert!(sample_dataset(0, 0).is_err());
    }

    #[test]
    fn probe_degenerate_images() {
        assert!(matches!(probe(&Tensor3::filled([3, 32, 32], 0.4)), Err(Error::BlankImage)));
        let mut red = Tensor3::zeros([3, 32, 32]);
        red.data_mut()[..32 * 32].iter_mut().for_each(|v| *v = 1.0);
        let r = probe(&red).unwrap();
        assert_eq!(r.hue_index, 0);
        assert_eq!(r.raw_size, 1.0);
        assert_eq!(r.size, SIZE_RANGE.1);
        assert!(r.clipped.contains(&"size".to_string()));
        assert!(probe(&Tensor3::zeros([3, 16, 16])).is_err());
    }

    #[test]
    fn attributes_follow_thresholds() {
        let at = |s: f64, x: f64, hue: usize| render(&spec(Shape::Square, hue, x, 0.5, s, 0.0)).unwrap().attributes;
        let a = at(0.2, 0.5, 0);
        assert_eq!((a["is_red"], a["is_green"], a["is_large"], a["is_left"]), (1.0, 0.0, 0.0, 0.0));
        let b = at(0.21, 0.49, 1);
        assert_eq!((b["is_red"], b["is_green"], b["is_large"], b["is_left"]), (0.0, 1.0, 1.0, 1.0));

        let samples = sample_dataset(30, 1).unwrap();
        let table = attribute_table(&samples).unwrap();
        for (i, s) in samples.iter().enumerate() {
            for (name, v) in &s.attributes {
                assert_eq!(table[name][i], *v);
            }
        }
        assert!(attribute_table(&[]).is_err());
    }

    #[test]
    fn export_then_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_dataset(4, 9).unwrap();
        export_dataset(&samples, dir.path()).unwrap();
        let folder = load_image_folder(dir.path()).unwrap();
        assert_eq!(folder.len(), 4);
        assert_eq!(folder.filenames[3], "00003.png");
        assert_eq!(folder.labels.unwrap(), attribute_table(&samples).unwrap());
        assert_eq!(folder.factors.unwrap()[2], samples[2].factors);
        // Backgrounds are quantized to 8 bits on export; shape pixels are exact.
        for (img, s) in folder.images.iter().zip(&samples) {
            assert!(img.data().iter().zip(s.image.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn ingest_without_manifest_and_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in sample_dataset(2, 0).unwrap().iter().enumerate() {
            save_png(&s.image, &dir.path().join(sample_filename(i))).unwrap();
        }
        let folder = load_image_folder(dir.path()).unwrap();
        assert!(folder.labels.is_none());
        std::fs::write(dir.path().join(MANIFEST_FILE), r#"[{"filename":"00000.png","attributes":{"smile":1}}]"#).unwrap();
        assert!(load_image_folder(dir.path()).is_err());
        assert!(load_image_folder(tempfile::tempdir().unwrap().path()).is_err());
    }
}
