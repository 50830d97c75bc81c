//! Op descriptors accepted by `/api/generate` and their evaluation.

use rcdm::toolkit::{self, AttributeMode, DEFAULT_DIRECTION_SCALE};
use rcdm::RepresentationVector;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::state::Session;

fn one() -> f64 {
    1.0
}

fn default_direction_scale() -> f64 {
    DEFAULT_DIRECTION_SCALE
}

/// One edit applied to the running conditioning vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpDescriptor {
    Perturb {
        lambda: f64,
        noise_seed: u64,
    },
    Interpolate {
        other_ref: String,
        alpha: f64,
    },
    Pca {
        bank_id: String,
        #[serde(rename = "K", alias = "k")]
        k: usize,
        #[serde(default = "default_direction_scale")]
        alpha: f64,
    },
    Attr {
        matrix_id: String,
        attribute: String,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        mode: AttributeMode,
    },
}

fn invalid(e: rcdm::Error) -> ApiError {
    match e {
        rcdm::Error::Dimension { .. } => e.into(),
        other => ApiError::unprocessable(other.to_string()),
    }
}

impl OpDescriptor {
    pub fn apply(&self, c: &RepresentationVector, session: &Session) -> ApiResult<RepresentationVector> {
        match self {
            Self::Perturb { lambda, noise_seed } => toolkit::perturb_seeded(c, *lambda, *noise_seed).map_err(invalid),
            Self::Interpolate { other_ref, alpha } => {
                let other = session.reference(other_ref)?;
                toolkit::interpolate(c, other, *alpha).map_err(invalid)
            }
            Self::Pca { bank_id, k, alpha } => {
                let bank = session.bank(bank_id)?;
                let direction = bank.component(*k).map_err(invalid)?;
                toolkit::apply_direction(c, direction, *alpha).map_err(invalid)
            }
            Self::Attr { matrix_id, attribute, scale, mode } => {
                let matrix = session.matrix(matrix_id)?;
                toolkit::attribute_edit(c, matrix, attribute, *scale, *mode).map_err(invalid)
            }
        }
    }
}

/// Applies `ops` left to right starting from `start`.
pub fn compose(start: &RepresentationVector, ops: &[OpDescriptor], session: &Session) -> ApiResult<RepresentationVector> {
    ops.iter().try_fold(start.clone(), |c, op| op.apply(&c, session))
}
