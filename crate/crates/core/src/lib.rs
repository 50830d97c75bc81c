//! Representation-conditioned diffusion models at desk scale.
//!
//! A small U-Net denoiser is conditioned on a representation vector `C` (an
//! embedding of some reference image). Editing `C` (perturbing it, interpolating
//! between two of them, or pushing it along a semantic direction) and sampling
//! again shows which factors of the image the representation encodes.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod rcde;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod toolkit;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use denoiser::{build_denoiser, Denoiser, DenoiserConfig, Injection};
pub use diffusion::{forward_sample, sample, sample_batch, Sampler, SamplingOptions};
pub use encoders::{EmbeddingMatrix, Encoder, EncoderSpec, LabelMap, RepresentationVector};
pub use error::{CheckpointError, Error, FormatError, Result};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use tensor::Tensor3;
pub use toolkit::{AttributeMode, DirectionBank, DirectionKind, SemanticDirection};
pub use trainer::{train, TrainConfig, Trainer};
