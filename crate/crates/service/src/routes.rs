use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header::{self, HeaderName, HeaderValue};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rcdm::encoders::ENCODER_NAMES;
use rcdm::{io, rcde, sample, RepresentationVector, Sampler};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ApiError, ApiResult};
use crate::ops::{compose, OpDescriptor};
use crate::state::{AppState, LoadedModel};

/// Response header carrying the base64-encoded JSON [`VectorEcho`].
pub const VECTOR_HEADER: &str = "x-rcdm-vector";

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn meta_body(state: &AppState, model: &LoadedModel) -> Value {
    json!({
        "checkpoint_id": model.id,
        "path": model.path,
        "file_sha256": model.file_sha256,
        "manifest": model.manifest,
        "cond_dim": model.cond_dim(),
        "image_shape": model.denoiser.config().sample_shape(),
        "samplers": ["ddim", "ddpm"],
        "encoders": ENCODER_NAMES,
        "checkpoint_encoder": model.encoder.as_ref().map(|e| e.spec().name()),
        "default_steps": state.config.default_steps,
        "max_steps": model.schedule.len(),
    })
}

pub async fn meta(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let model = state.model()?;
    Ok(Json(meta_body(&state, &model)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRequest {
    pub path: PathBuf,
}

pub async fn load_checkpoint(State(state): State<AppState>, Json(req): Json<LoadRequest>) -> ApiResult<Json<Value>> {
    let loader = state.clone();
    let model = blocking(move || Ok(loader.load_checkpoint_file(&req.path)?)).await?;
    Ok(Json(meta_body(&state, &model)))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ConditionSpec {
    Vector(Vec<f64>),
    Reference {
        ref_id: String,
        #[serde(default)]
        ops: Vec<OpDescriptor>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub condition: ConditionSpec,
    #[serde(default)]
    pub sampler: Option<Sampler>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// Everything needed to regenerate an image bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEcho {
    pub values: Vec<f64>,
    pub source: String,
    pub sampler: Sampler,
    pub steps: usize,
    pub seed: u64,
}

impl VectorEcho {
    pub fn decode_header(value: &str) -> Option<Self> {
        serde_json::from_slice(&BASE64.decode(value).ok()?).ok()
    }
}

pub async fn generate(State(state): State<AppState>, Json(req): Json<GenerateRequest>) -> ApiResult<Response> {
    let model = state.model()?;
    let condition = match &req.condition {
        ConditionSpec::Vector(values) => RepresentationVector::new(values.clone(), "request")
            .map_err(|e| ApiError::unprocessable(e.to_string()))?,
        ConditionSpec::Reference { ref_id, ops } => {
            let session = state.session();
            compose(session.reference(ref_id)?, ops, &session)?
        }
    };
    if condition.dim() != model.cond_dim() {
        return Err(rcdm::Error::Dimension { expected: model.cond_dim(), got: condition.dim() }.into());
    }
    let sampler = req.sampler.unwrap_or(Sampler::Ddim);
    let steps = req.steps.unwrap_or(state.config.default_steps);
    let seed = req.seed;
    let echo = VectorEcho {
        values: condition.values().to_vec(),
        source: condition.source().to_string(),
        sampler,
        steps,
        seed,
    };
    let _slot = state.generation_slots.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let png = blocking(move || {
        let out = sample(&model.denoiser, &condition, &model.schedule, sampler, steps, seed)?;
        Ok(io::encode_png(&out.data.to_unit_range())?)
    })
    .await?;
    let header_value = BASE64.encode(serde_json::to_vec(&echo).map_err(|e| ApiError::internal(e.to_string()))?);
    let header_value = HeaderValue::from_str(&header_value).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("image/png")), (HeaderName::from_static(VECTOR_HEADER), header_value)],
        png,
    )
        .into_response())
}

fn matrix_summary(id: &str, m: &rcdm::EmbeddingMatrix) -> Value {
    json!({ "matrix_id": id, "n": m.rows(), "d": m.dim(), "attributes": m.attribute_names(), "source": m.source() })
}

/// Body: raw RCDE bytes.
pub async fn upload_embeddings(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let matrix = rcde::from_bytes(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let summary = matrix_summary("", &matrix);
    let id = state.session().add_matrix(matrix);
    let mut summary = summary;
    summary["matrix_id"] = json!(id);
    Ok(Json(summary))
}

pub async fn embeddings_info(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.session();
    Ok(Json(matrix_summary(&id, session.matrix(&id)?)))
}

pub async fn embedding_row(
    State(state): State<AppState>,
    Path((id, row)): Path<(String, usize)>,
) -> ApiResult<Json<Value>> {
    let session = state.session();
    let matrix = session.matrix(&id)?;
    if row >= matrix.rows() {
        return Err(ApiError::bad_request(format!("row {row} out of range for {} rows", matrix.rows())));
    }
    let labels: serde_json::Map<String, Value> = matrix
        .attribute_names()
        .into_iter()
        .map(|name| {
            let v = matrix.attribute(&name).map(|col| col[row]).unwrap_or(f64::NAN);
            (name, json!(v))
        })
        .collect();
    Ok(Json(json!({ "matrix_id": id, "row": row, "values": matrix.row_values(row), "labels": labels })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaRequest {
    pub matrix_id: String,
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
}

pub async fn fit_pca(State(state): State<AppState>, Json(req): Json<PcaRequest>) -> ApiResult<Json<Value>> {
    let matrix = Arc::clone(state.session().matrix(&req.matrix_id)?);
    let bank = blocking(move || Ok(rcdm::toolkit::fit_pca_directions(&matrix, req.k)?)).await?;
    let variances: Vec<f64> = bank.directions.iter().filter_map(|d| d.explained_variance).collect();
    let total = bank.total_variance;
    let id = state.session().add_bank(bank);
    Ok(Json(json!({ "bank_id": id, "explained_variances": variances, "total_variance": total })))
}

pub async fn bank(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let json = state.session().bank(&id)?.to_json();
    Ok(([(header::CONTENT_TYPE, "application/json")], json).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum ReferenceRequest {
    Row {
        matrix_id: String,
        row: usize,
    },
    Image {
        /// Base64-encoded PNG.
        image: String,
        #[serde(default)]
        encoder: Option<String>,
    },
    Vector {
        values: Vec<f64>,
    },
}

pub async fn add_reference(State(state): State<AppState>, Json(req): Json<ReferenceRequest>) -> ApiResult<Json<Value>> {
    let c = match req {
        ReferenceRequest::Row { matrix_id, row } => state.session().matrix(&matrix_id)?.row(row)?,
        ReferenceRequest::Vector { values } => {
            RepresentationVector::new(values, "request").map_err(|e| ApiError::unprocessable(e.to_string()))?
        }
        ReferenceRequest::Image { image, encoder } => {
            let model = state.model()?;
            let enc = model
                .encoder
                .as_ref()
                .ok_or_else(|| ApiError::bad_request("the loaded checkpoint has no image encoder"))?;
            if let Some(name) = encoder.filter(|n| n != enc.spec().name()) {
                return Err(ApiError::bad_request(format!(
                    "encoder {name:?} does not match the checkpoint encoder {:?}",
                    enc.spec().name()
                )));
            }
            let bytes = BASE64.decode(image).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
            enc.encode(&io::decode_png(&bytes)?)?
        }
    };
    let dim = c.dim();
    let id = state.session().add_reference(c);
    Ok(Json(json!({ "ref_id": id, "dim": dim })))
}

pub async fn reference(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.session();
    let c = session.reference(&id)?;
    Ok(Json(json!({ "ref_id": id, "values": c.values(), "source": c.source(), "dim": c.dim() })))
}
