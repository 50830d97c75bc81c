//! Training loop for the conditional denoiser: ε-prediction MSE, Adam, EMA and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, AdamState, Checkpoint};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{forward_sample, gaussian, DiffusionSample};
use crate::encoders::{EmbeddingMatrix, EncoderSpec, RepresentationVector};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rcde::load_embeddings;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::Tensor3;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Window of the moving average used to judge loss curves.
pub const LOSS_SMOOTHING_WINDOW: usize = 50;
/// Span over which a non-decreasing smoothed loss is reported as a stall.
pub const STALL_WINDOW: usize = 500;

fn default_learning_rate() -> f64 {
    2e-4
}

fn default_ema_decay() -> f64 {
    0.999
}

fn default_condition_dropout() -> f64 {
    0.1
}

fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

/// Where the conditioning vectors for the training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionSource {
    /// A built-in encoder, fitted on the training images.
    Encoder { name: String },
    /// An RCDE file whose row `i` conditions training image `i`.
    Embeddings { path: PathBuf },
}

impl Default for ConditionSource {
    fn default() -> Self {
        Self::Encoder { name: "pixel_stats".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub conditions: ConditionSource,
    /// Probability of replacing a training condition by the zero vector.
    #[serde(default = "default_condition_dropout")]
    pub condition_dropout: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Defaults for everything except the epoch count and batch size.
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate: default_learning_rate(),
            ema_decay: default_ema_decay(),
            seed: 0,
            schedule: ScheduleSpec::default(),
            conditions: ConditionSource::default(),
            condition_dropout: default_condition_dropout(),
            grad_clip: default_grad_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return bad(format!("condition_dropout must be in [0, 1], got {}", self.condition_dropout));
        }
        if let Some(clip) = self.grad_clip {
            if clip.is_nan() || clip <= 0.0 {
                return bad(format!("grad_clip must be positive, got {clip}"));
            }
        }
        NoiseSchedule::from_spec(self.schedule).map(|_| ())
    }
}

/// Training images (in `[0, 1]`) paired with their conditioning vectors.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<Tensor3>,
    pub conditions: Vec<RepresentationVector>,
    pub encoder: Option<EncoderSpec>,
}

impl TrainingSet {
    /// Resolves `source` for `images`: fits the named encoder or loads the embedding file.
    pub fn prepare(source: &ConditionSource, images: Vec<Tensor3>, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        match source {
            ConditionSource::Encoder { name } => {
                let spec = EncoderSpec::fit_by_name(name, &images, seed)?;
                Self::with_encoder(spec, images)
            }
            ConditionSource::Embeddings { path } => Self::with_embeddings(&load_embeddings(path)?, images),
        }
    }

    /// Conditions computed by an already fitted encoder.
    pub fn with_encoder(spec: EncoderSpec, images: Vec<Tensor3>) -> Result<Self> {
        let conditions = spec.instantiate().encode_all(&images)?;
        Ok(Self { images, conditions, encoder: Some(spec) })
    }

    pub fn with_embeddings(matrix: &EmbeddingMatrix, images: Vec<Tensor3>) -> Result<Self> {
        if matrix.rows() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} embedding rows for {} training images",
                matrix.rows(),
                images.len()
            )));
        }
        let conditions = (0..matrix.rows()).map(|i| matrix.row(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self { images, conditions, encoder: None })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Progress report after each epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

/// `ema <- d * ema + (1 - d) * raw`, element-wise.
pub fn ema_update(ema: &mut ParamStore<f32>, raw: &ParamStore<f32>, decay: f64) {
    for (e, r) in ema.iter_mut().zip(raw.iter()) {
        for (a, &b) in e.data.iter_mut().zip(&r.data) {
            *a = (decay * *a as f64 + (1.0 - decay) * b as f64) as f32;
        }
    }
}

/// Decay actually used at optimizer step `step` (counting from 1): short runs warm up
/// with `(1 + step) / (10 + step)` before reaching the configured value.
pub fn effective_ema_decay(decay: f64, step: u64) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

fn adam_update(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut AdamState,
    step: u64,
    learning_rate: f64,
    grad_scale: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(step as f64);
    let iter = params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for ((p, g), (m, v)) in iter {
        for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            let g = gi as f64 * grad_scale;
            let m_new = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * g;
            let v_new = ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = learning_rate * (m_new / bc1) / ((v_new / bc2).sqrt() + ADAM_EPSILON);
            *w = (*w as f64 - update) as f32;
        }
    }
}

/// Mutable training state; [`Trainer::checkpoint`] snapshots it.
pub struct Trainer {
    config: TrainConfig,
    net: Denoiser,
    ema: ParamStore<f32>,
    adam: AdamState,
    schedule: NoiseSchedule,
    step: u64,
    epochs_completed: usize,
    loss_history: Vec<f64>,
    encoder: Option<EncoderSpec>,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig, model: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let net = Denoiser::build(model, config.seed)?;
        let schedule = NoiseSchedule::from_spec(config.schedule)?;
        if schedule.len() > model.num_timesteps {
            return Err(Error::Config(format!(
                "schedule has {} timesteps but the model supports {}",
                schedule.len(),
                model.num_timesteps
            )));
        }
        let zeros = net.params().zeros_like();
        Ok(Self {
            ema: net.params().clone(),
            adam: AdamState { m: zeros.clone(), v: zeros },
            net,
            schedule,
            config,
            step: 0,
            epochs_completed: 0,
            loss_history: Vec::new(),
            encoder: None,
        })
    }

    /// Continues from `ckpt`; `config` may change the epoch budget and optimizer knobs.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.schedule != ckpt.train.schedule {
            return Err(Error::Config("cannot change the noise schedule when resuming".into()));
        }
        let net = Denoiser::from_params(&ckpt.model, ckpt.raw)?;
        let adam = ckpt.adam.unwrap_or_else(|| {
            let zeros = net.params().zeros_like();
            AdamState { m: zeros.clone(), v: zeros }
        });
        Ok(Self {
            schedule: NoiseSchedule::from_spec(config.schedule)?,
            config,
            net,
            ema: ckpt.ema,
            adam,
            step: ckpt.step,
            epochs_completed: ckpt.epochs_completed,
            loss_history: ckpt.loss_history,
            encoder: ckpt.encoder,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.net
    }

    /// Encoder recorded in checkpoints (set by [`Trainer::fit`] or carried over on resume).
    pub fn encoder(&self) -> Option<&EncoderSpec> {
        self.encoder.as_ref()
    }

    fn check_data(&self, data: &TrainingSet) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let cfg = self.net.config();
        let shape = cfg.sample_shape();
        if let Some(bad) = data.images.iter().find(|im| im.shape() != shape) {
            return Err(Error::Shape { expected: shape.to_vec(), got: bad.shape().to_vec() });
        }
        if data.conditions.len() != data.images.len() {
            return Err(Error::InvalidArgument("every image needs a condition".into()));
        }
        if let Some(bad) = data.conditions.iter().find(|c| c.dim() != cfg.cond_dim) {
            return Err(Error::Dimension { expected: cfg.cond_dim, got: bad.dim() });
        }
        Ok(())
    }

    /// One pass over `data` in a seeded random order; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<f64> {
        self.check_data(data)?;
        let epoch = self.epochs_completed as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let cfg = self.net.config().clone();
        let shape = cfg.sample_shape();
        let t_max = self.schedule.len();
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let mut x_t = Vec::with_capacity(batch.len());
            let mut eps = Vec::with_capacity(batch.len());
            let mut ts = Vec::with_capacity(batch.len());
            let mut cond = Vec::with_capacity(batch.len() * cfg.cond_dim);
            for &i in batch {
                let t = rng.random_range(1..=t_max);
                let noise = gaussian(shape, &mut rng);
                let x0 = DiffusionSample::clean(data.images[i].to_model_range());
                x_t.push(forward_sample(&x0, t, &self.schedule, &noise)?.data);
                eps.push(noise);
                ts.push(t);
                let dropped = self.config.condition_dropout > 0.0 && rng.random::<f64>() < self.config.condition_dropout;
                if dropped {
                    cond.extend(std::iter::repeat_n(0.0f32, cfg.cond_dim));
                } else {
                    cond.extend(data.conditions[i].values().iter().map(|&v| v as f32));
                }
            }
            let xa = self.net.pack(&x_t.iter().collect::<Vec<_>>())?;
            let ea = self.net.pack(&eps.iter().collect::<Vec<_>>())?;
            let (loss, grads) = self.net.loss_and_grad(&xa, &ts, Some(&cond), &ea)?;
            self.step += 1;
            if !loss.is_finite() || !grads.params.all_finite() {
                return Err(Error::NonFiniteLoss { step: self.step, value: loss });
            }
            let norm = grads.params.sq_norm().sqrt();
            let scale = match self.config.grad_clip {
                Some(clip) if norm > clip => clip / norm,
                _ => 1.0,
            };
            adam_update(self.net.params_mut(), &grads.params, &mut self.adam, self.step, self.config.learning_rate, scale);
            ema_update(&mut self.ema, self.net.params(), effective_ema_decay(self.config.ema_decay, self.step));
            self.loss_history.push(loss);
            total += loss;
            batches += 1;
        }
        self.epochs_completed += 1;
        Ok(total / batches as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.net.config().clone(),
            train: self.config.clone(),
            encoder: self.encoder.clone(),
            step: self.step,
            epochs_completed: self.epochs_completed,
            loss_history: self.loss_history.clone(),
            ema: self.ema.clone(),
            raw: self.net.params().clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Runs `config.epochs` epochs, saving to `out` (if given) after each one.
    pub fn fit(
        &mut self,
        data: &TrainingSet,
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Checkpoint> {
        self.check_data(data)?;
        if data.encoder.is_some() {
            self.encoder = data.encoder.clone();
        }
        for _ in 0..self.config.epochs {
            let mean_loss = self.run_epoch(data)?;
            let checkpoint = out.map(|p| save_checkpoint(&self.checkpoint(), p)).transpose()?;
            on_epoch(&EpochReport { epoch: self.epochs_completed, step: self.step, mean_loss, checkpoint });
        }
        Ok(self.checkpoint())
    }
}

/// Trains a fresh model on `images`, resolving conditions from `config.conditions`.
pub fn train(config: &TrainConfig, model: &DenoiserConfig, images: Vec<Tensor3>, out: Option<&Path>) -> Result<Checkpoint> {
    let data = TrainingSet::prepare(&config.conditions, images, config.seed)?;
    Trainer::new(config.clone(), model)?.fit(&data, out, |_| {})
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(history: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (i, v) in history.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= history[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Start steps of `span`-long stretches over which the smoothed loss did not decrease.
pub fn stalled_windows(history: &[f64], span: usize) -> Vec<usize> {
    let s = smoothed(history, LOSS_SMOOTHING_WINDOW);
    if span == 0 || s.len() <= span {
        return Vec::new();
    }
    (0..s.len() - span).step_by(span).filter(|&i| s[i + span] >= s[i]).collect()
}
