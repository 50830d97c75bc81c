use std::path::{Path, PathBuf};
use std::str::FromStr;

use rcdm::rcde::load_embeddings;
use rcdm::{io, Encoder, RepresentationVector};
use serde::Deserialize;

use crate::CliError;

/// Where a conditioning vector comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reference {
    /// A PNG encoded with the checkpoint's encoder.
    Image(PathBuf),
    /// Row of an RCDE file, written `file.rcde#ROW`.
    Row(PathBuf, usize),
    /// A JSON vector file.
    Vector(PathBuf),
}

impl FromStr for Reference {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some((path, row)) = s.rsplit_once('#') {
            let row = row.parse().map_err(|_| format!("bad row {row:?} in {s:?}"))?;
            return Ok(Self::Row(path.into(), row));
        }
        let lower = s.to_ascii_lowercase();
        if lower.ends_with(".png") {
            Ok(Self::Image(s.into()))
        } else if lower.ends_with(".json") {
            Ok(Self::Vector(s.into()))
        } else if lower.ends_with(".rcde") {
            Err(format!("{s:?}: name a row, as in {s}#0"))
        } else {
            Err(format!("{s:?}: expected image.png, matrix.rcde#ROW or vector.json"))
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VectorFile {
    Bare(Vec<f64>),
    Object { values: Vec<f64> },
}

pub fn read_vector_file(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| rcdm::Error::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(VectorFile::Bare(v) | VectorFile::Object { values: v }) => Ok(v),
        Err(e) => Err(CliError::Data(format!("{}: expected a JSON array of numbers or {{\"values\": [...]}}: {e}", path.display()))),
    }
}

impl Reference {
    pub fn resolve(&self, encoder: Option<&Encoder>) -> Result<RepresentationVector, CliError> {
        Ok(match self {
            Self::Image(path) => {
                let encoder = encoder.ok_or_else(|| {
                    CliError::Usage("this checkpoint has no built-in encoder; use an RCDE row or a vector file".into())
                })?;
                let c = encoder.encode(&io::load_png(path)?)?;
                c.with_source(format!("{}:{}", encoder.spec().name(), path.display()))
            }
            Self::Row(path, row) => load_embeddings(path)?.row(*row)?,
            Self::Vector(path) => RepresentationVector::new(read_vector_file(path)?, path.display().to_string())?,
        })
    }
}
