//! Checkpoint container.
//!
//! ```text
//! "RCKP" | version: u8 | M: u32 LE | M bytes UTF-8 JSON manifest | payload: f32 LE arrays
//! ```
//!
//! The manifest lists every tensor as `{group, name, shape, offset, len}` with offsets counted
//! in f32 elements from the start of the payload, and records the payload's SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::encoders::{Encoder, EncoderSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::io::write_atomic;
use crate::nn::ParamStore;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::trainer::TrainConfig;

pub const MAGIC: [u8; 4] = *b"RCKP";
pub const VERSION: u8 = 1;
pub const FORMAT: &str = "rcdm-checkpoint/1";

const GROUP_EMA: &str = "ema";
const GROUP_RAW: &str = "raw";
const GROUP_ADAM_M: &str = "adam_m";
const GROUP_ADAM_V: &str = "adam_v";

/// First and second moment estimates of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

/// Everything needed to sample from, or resume training of, a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    /// Encoder that produced the training conditions, if they came from one.
    pub encoder: Option<EncoderSpec>,
    pub step: u64,
    pub epochs_completed: usize,
    pub loss_history: Vec<f64>,
    pub ema: ParamStore<f32>,
    pub raw: ParamStore<f32>,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub encoder: Option<EncoderSpec>,
    pub step: u64,
    pub epochs_completed: usize,
    pub loss_history: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

fn corrupted(msg: impl Into<String>) -> Error {
    CheckpointError::Corrupted(msg.into()).into()
}

impl Checkpoint {
    /// Sampling network (EMA weights).
    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_params(&self.model, self.ema.clone())
    }

    /// Network with the raw optimizer weights.
    pub fn raw_denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_params(&self.model, self.raw.clone())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(self.train.schedule)
    }

    pub fn encoder(&self) -> Option<Encoder> {
        self.encoder.as_ref().map(EncoderSpec::instantiate)
    }

    fn groups(&self) -> Vec<(&'static str, &ParamStore<f32>)> {
        let mut groups = vec![(GROUP_EMA, &self.ema), (GROUP_RAW, &self.raw)];
        if let Some(adam) = &self.adam {
            groups.push((GROUP_ADAM_M, &adam.m));
            groups.push((GROUP_ADAM_V, &adam.v));
        }
        groups
    }

    /// Manifest and payload without the framing.
    pub fn manifest_and_payload(&self) -> (Manifest, Vec<u8>) {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (group, store) in self.groups() {
            for p in store.iter() {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len: p.data.len(),
                });
                offset += p.data.len();
                payload.extend(p.data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            model: self.model.clone(),
            schedule: self.train.schedule,
            train: self.train.clone(),
            encoder: self.encoder.clone(),
            step: self.step,
            epochs_completed: self.epochs_completed,
            loss_history: self.loss_history.clone(),
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        (manifest, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (manifest, payload) = self.manifest_and_payload();
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(9 + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = read_manifest(bytes)?;
        let digest = hex::encode(Sha256::digest(payload));
        if digest != manifest.payload_sha256 {
            return Err(corrupted("payload hash does not match the manifest"));
        }
        if manifest.schedule != manifest.train.schedule {
            return Err(corrupted("schedule disagrees with the training configuration"));
        }
        if let Some(enc) = &manifest.encoder {
            if enc.dim() != manifest.model.cond_dim {
                return Err(corrupted(format!(
                    "encoder dimension {} differs from cond_dim {}",
                    enc.dim(),
                    manifest.model.cond_dim
                )));
            }
        }
        if payload.len() % 4 != 0 {
            return Err(corrupted("payload length is not a multiple of 4"));
        }
        let values: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

        let mut stores: Vec<(String, ParamStore<f32>)> = Vec::new();
        let mut expected_offset = 0;
        for t in &manifest.tensors {
            if t.offset != expected_offset || t.shape.iter().product::<usize>() != t.len {
                return Err(corrupted(format!("tensor {}/{} has an inconsistent layout", t.group, t.name)));
            }
            let data = values
                .get(t.offset..t.offset + t.len)
                .ok_or_else(|| corrupted(format!("tensor {}/{} runs past the payload", t.group, t.name)))?;
            expected_offset += t.len;
            if stores.last().is_none_or(|(g, _)| *g != t.group) {
                stores.push((t.group.clone(), ParamStore::new()));
            }
            stores.last_mut().expect("pushed").1.push(t.name.clone(), t.shape.clone(), data.to_vec());
        }
        if expected_offset != values.len() {
            return Err(corrupted("payload has unreferenced trailing values"));
        }

        let mut take = |group: &str| -> Option<ParamStore<f32>> {
            let i = stores.iter().position(|(g, _)| g == group)?;
            Some(stores.remove(i).1)
        };
        let ema = take(GROUP_EMA).ok_or_else(|| corrupted("missing EMA weights"))?;
        let raw = take(GROUP_RAW).ok_or_else(|| corrupted("missing raw weights"))?;
        let adam = match (take(GROUP_ADAM_M), take(GROUP_ADAM_V)) {
            (Some(m), Some(v)) => Some(AdamState { m, v }),
            (None, None) => None,
            _ => return Err(corrupted("incomplete optimizer state")),
        };
        if let Some((group, _)) = stores.first() {
            return Err(corrupted(format!("unknown tensor group {group:?}")));
        }
        let ckpt = Checkpoint {
            model: manifest.model,
            train: manifest.train,
            encoder: manifest.encoder,
            step: manifest.step,
            epochs_completed: manifest.epochs_completed,
            loss_history: manifest.loss_history,
            ema,
            raw,
            adam,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks that every tensor group matches the architecture described by `model`.
    pub fn validate(&self) -> Result<()> {
        let reference = Denoiser::<f32>::build(&self.model, 0).map_err(|e| corrupted(e.to_string()))?;
        for (group, store) in self.groups() {
            if !reference.params().same_layout(store) {
                return Err(corrupted(format!("{group} tensors do not match the model configuration")));
            }
            if !store.all_finite() {
                return Err(corrupted(format!("{group} tensors contain non-finite values")));
            }
        }
        Ok(())
    }
}

/// Splits a checkpoint file into its parsed manifest and raw payload bytes.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = *bytes.get(4).ok_or_else(|| corrupted("truncated header"))?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version.to_string(), expected: VERSION.to_string() }.into());
    }
    let len_bytes = bytes.get(5..9).ok_or_else(|| corrupted("truncated header"))?;
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let json = bytes.get(9..9 + len).ok_or_else(|| corrupted("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupted(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::VersionMismatch { found: manifest.format, expected: FORMAT.into() }.into());
    }
    Ok((manifest, &bytes[9 + len..]))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let path = path.as_ref();
    write_atomic(path, &ckpt.to_bytes())?;
    Ok(path.to_path_buf())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Injection;

    fn tiny() -> Checkpoint {
        let model = DenoiserConfig {
            image_channels: 1,
            image_size: 8,
            base_width: 4,
            depth: 1,
            cond_dim: 3,
            time_embed_dim: 4,
            injection: Injection::AddAfterNorm,
            num_timesteps: 10,
            spatial_condition: false,
        };
        let net = Denoiser::<f32>::build(&model, 1).unwrap();
        let mut train = TrainConfig::new(1, 2);
        train.schedule = ScheduleSpec { timesteps: 10, ..ScheduleSpec::default() };
        Checkpoint {
            model,
            train,
            encoder: None,
            step: 3,
            epochs_completed: 1,
            loss_history: vec![1.0, 0.1 + 0.2, 1.0 / 3.0],
            ema: net.params().clone(),
            raw: net.params().clone(),
            adam: Some(AdamState { m: net.params().zeros_like(), v: net.params().zeros_like() }),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = tiny();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = tiny().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Corrupted(_)))
        ));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(CheckpointError::Corrupted(_)))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { .. }))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"RCDE"), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn layout_must_match_model() {
        let mut ckpt = tiny();
        ckpt.model.base_width = 8;
        assert!(Checkpoint::from_bytes(&ckpt.to_bytes()).is_err());
    }
}
