use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use rcdm::checkpoint::{read_manifest, Manifest};
use rcdm::{Checkpoint, Denoiser, DirectionBank, EmbeddingMatrix, Encoder, NoiseSchedule, RepresentationVector};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::error::{ApiError, ApiResult};
use crate::ServiceConfig;

/// A checkpoint ready for sampling; immutable once loaded.
pub struct LoadedModel {
    pub id: String,
    pub path: Option<PathBuf>,
    pub file_sha256: String,
    pub manifest: Manifest,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub encoder: Option<Encoder>,
}

impl LoadedModel {
    pub fn from_bytes(id: String, path: Option<PathBuf>, bytes: &[u8]) -> rcdm::Result<Self> {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let (manifest, _) = read_manifest(bytes)?;
        Ok(Self {
            id,
            path,
            file_sha256: hex::encode(Sha256::digest(bytes)),
            manifest,
            denoiser: ckpt.denoiser()?,
            schedule: ckpt.schedule()?,
            encoder: ckpt.encoder(),
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.denoiser.config().cond_dim
    }
}

/// Uploaded matrices, fitted banks and reference vectors, keyed by opaque ids.
#[derive(Default)]
pub struct Session {
    next_id: u64,
    matrices: HashMap<String, Arc<EmbeddingMatrix>>,
    banks: HashMap<String, Arc<DirectionBank>>,
    references: HashMap<String, RepresentationVector>,
}

impl Session {
    fn fresh_id(&mut self, prefix: &str) -> String {
        self.next_id += 1;
        format!("{prefix}{}", self.next_id)
    }

    pub fn add_matrix(&mut self, matrix: EmbeddingMatrix) -> String {
        let id = self.fresh_id("m");
        self.matrices.insert(id.clone(), Arc::new(matrix));
        id
    }

    pub fn add_bank(&mut self, bank: DirectionBank) -> String {
        let id = self.fresh_id("b");
        self.banks.insert(id.clone(), Arc::new(bank));
        id
    }

    pub fn add_reference(&mut self, c: RepresentationVector) -> String {
        let id = self.fresh_id("r");
        self.references.insert(id.clone(), c);
        id
    }

    pub fn matrix(&self, id: &str) -> ApiResult<&Arc<EmbeddingMatrix>> {
        self.matrices.get(id).ok_or_else(|| ApiError::unknown("matrix_id", id))
    }

    pub fn bank(&self, id: &str) -> ApiResult<&Arc<DirectionBank>> {
        self.banks.get(id).ok_or_else(|| ApiError::unknown("bank_id", id))
    }

    pub fn reference(&self, id: &str) -> ApiResult<&RepresentationVector> {
        self.references.get(id).ok_or_else(|| ApiError::unknown("ref_id", id))
    }

    pub fn checkpoint_id(&mut self) -> String {
        self.fresh_id("ckpt")
    }
}

/// Shared handle passed to every request handler.
#[derive(Clone)]
pub struct AppState {
    pub config: Arc<ServiceConfig>,
    model: Arc<RwLock<Option<Arc<LoadedModel>>>>,
    session: Arc<Mutex<Session>>,
    /// FIFO queue in front of the sampler; one permit per concurrent generation.
    pub generation_slots: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let slots = config.generation_slots.max(1);
        Self {
            config: Arc::new(config),
            model: Arc::default(),
            session: Arc::default(),
            generation_slots: Arc::new(Semaphore::new(slots)),
        }
    }

    pub fn model(&self) -> ApiResult<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone().ok_or_else(ApiError::no_checkpoint)
    }

    pub fn set_model(&self, model: LoadedModel) -> Arc<LoadedModel> {
        let model = Arc::new(model);
        *self.model.write().expect("model lock") = Some(model.clone());
        model
    }

    pub fn session(&self) -> MutexGuard<'_, Session> {
        self.session.lock().expect("session lock")
    }

    /// Reads and installs the checkpoint at `path`.
    pub fn load_checkpoint_file(&self, path: &Path) -> rcdm::Result<Arc<LoadedModel>> {
        let bytes = std::fs::read(path).map_err(|e| rcdm::Error::io(path, e))?;
        let id = self.session().checkpoint_id();
        let model = LoadedModel::from_bytes(id, Some(path.to_path_buf()), &bytes)?;
        Ok(self.set_model(model))
    }
}
