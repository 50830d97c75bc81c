use std::path::{Path, PathBuf};

use rcdm::checkpoint::load_checkpoint;
use rcdm::io::{grid, save_png, write_atomic};
use rcdm::rcde::{load_embeddings, save_embeddings};
use rcdm::synthdata::{export_dataset, load_image_folder, sample_dataset};
use rcdm::toolkit::{self, DirectionBank};
use rcdm::trainer::{smoothed, stalled_windows, TrainingSet, LOSS_SMOOTHING_WINDOW, STALL_WINDOW};
use rcdm::{
    sample_batch, Checkpoint, Denoiser, DenoiserConfig, EmbeddingMatrix, Encoder, EncoderSpec, NoiseSchedule,
    RepresentationVector, Sampler, SamplingOptions, TrainConfig, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::{Cli, CliError, Command, DirectionsCommand, ModelArgs, Reference};

/// Contents of a `train --config` file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: DenoiserConfig,
    train: TrainConfig,
}

/// One generated cell and the exact vector behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarCell {
    pub label: String,
    pub seed: u64,
    pub source: String,
    pub values: Vec<f64>,
}

/// JSON written next to every generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub command: String,
    pub checkpoint: PathBuf,
    pub sampler: Sampler,
    pub steps: usize,
    pub seed: u64,
    pub cells: Vec<SidecarCell>,
}

/// `grid.png` -> `grid.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

struct Loaded {
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    encoder: Option<Encoder>,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self, CliError> {
        let ckpt = load_checkpoint(path)?;
        Ok(Self { denoiser: ckpt.denoiser()?, schedule: ckpt.schedule()?, encoder: ckpt.encoder() })
    }

    fn resolve(&self, reference: &Reference) -> Result<RepresentationVector, CliError> {
        reference.resolve(self.encoder.as_ref())
    }
}

/// Samples every `(label, vector, seed)` cell, writes them as one PNG strip and the sidecar.
fn render_cells(
    command: &str,
    args: &ModelArgs,
    loaded: &Loaded,
    cells: Vec<(String, RepresentationVector, u64)>,
    out: &Path,
) -> Result<(), CliError> {
    let conditions: Vec<&RepresentationVector> = cells.iter().map(|(_, c, _)| c).collect();
    let seeds: Vec<u64> = cells.iter().map(|(_, _, s)| *s).collect();
    let options = SamplingOptions { sampler: args.sampler, steps: args.steps };
    let samples = sample_batch(&loaded.denoiser, &conditions, &loaded.schedule, options, &seeds)?;
    let images: Vec<_> = samples.iter().map(|s| s.data.to_unit_range()).collect();
    let image = if images.len() == 1 { images[0].clone() } else { grid(&images)? };
    save_png(&image, out)?;
    let sidecar = GridSidecar {
        command: command.into(),
        checkpoint: args.checkpoint.clone(),
        sampler: args.sampler,
        steps: args.steps,
        seed: args.seed,
        cells: cells
            .into_iter()
            .map(|(label, c, seed)| SidecarCell { label, seed, source: c.source().to_string(), values: c.into_values() })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path(out), &json)?;
    eprintln!("wrote {} ({} cells, seed {})", out.display(), sidecar.cells.len(), args.seed);
    Ok(())
}

fn read_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| rcdm::Error::io(path, e))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    config.model.validate()?;
    config.train.validate()?;
    Ok(config)
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let config = read_run_config(config)?;
    let folder = load_image_folder(data)?;
    let (mut trainer, data) = match resume {
        Some(path) => {
            let ckpt: Checkpoint = load_checkpoint(path)?;
            if ckpt.model != config.model {
                return Err(CliError::Usage(format!("the model section does not match {}", path.display())));
            }
            let data = match &ckpt.encoder {
                Some(spec) => TrainingSet::with_encoder(spec.clone(), folder.images)?,
                None => TrainingSet::prepare(&config.train.conditions, folder.images, config.train.seed)?,
            };
            eprintln!("resuming at step {} (epoch {})", ckpt.step, ckpt.epochs_completed);
            (Trainer::resume(ckpt, config.train)?, data)
        }
        None => {
            let data = TrainingSet::prepare(&config.train.conditions, folder.images, config.train.seed)?;
            (Trainer::new(config.train, &config.model)?, data)
        }
    };
    let start = std::time::Instant::now();
    let ckpt = trainer.fit(&data, Some(out), |r| {
        eprintln!("epoch {} step {} loss {:.5} ({:.0?})", r.epoch, r.step, r.mean_loss, start.elapsed());
    })?;
    let curve = smoothed(&ckpt.loss_history, LOSS_SMOOTHING_WINDOW);
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!("smoothed loss {first:.5} -> {last:.5} over {} steps", ckpt.step);
    }
    let stalls = stalled_windows(&ckpt.loss_history, STALL_WINDOW);
    if !stalls.is_empty() {
        eprintln!("warning: smoothed loss did not decrease over {} window(s) of {STALL_WINDOW} steps", stalls.len());
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn encode(encoder: &str, images: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let folder = load_image_folder(images)?;
    let spec = EncoderSpec::fit_by_name(encoder, &folder.images, seed)?;
    let vectors = spec.instantiate().encode_all(&folder.images)?;
    let matrix = EmbeddingMatrix::from_vectors(&vectors, folder.labels, format!("{encoder}:{}", images.display()))?;
    save_embeddings(&matrix, out)?;
    eprintln!("wrote {} ({} x {})", out.display(), matrix.rows(), matrix.dim());
    Ok(())
}

/// Labels like `alpha=0.3` without float noise such as `0.30000000000000004`.
fn label(name: &str, v: f64) -> String {
    format!("{name}={}", (v * 1e9).round() / 1e9)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { n, seed, out } => {
            let samples = sample_dataset(n as usize, seed)?;
            let manifest = export_dataset(&samples, &out)?;
            eprintln!("wrote {n} images and {} (seed {seed})", manifest.display());
            Ok(())
        }
        Command::Encode { encoder, images, out, seed } => encode(&encoder, &images, &out, seed),
        Command::Train { config, data, out, resume } => train(&config, &data, &out, resume.as_deref()),
        Command::Sample { model, condition, count, out } => {
            let loaded = Loaded::open(&model.checkpoint)?;
            let c = loaded.resolve(&condition.reference())?;
            let cells = (0..count).map(|k| (format!("seed={}", model.seed + k), c.clone(), model.seed + k)).collect();
            render_cells("sample", &model, &loaded, cells, &out)
        }
        Command::PerturbSweep { model, reference, lambdas, noise_seed, resample_noise, out } => {
            let loaded = Loaded::open(&model.checkpoint)?;
            let c = loaded.resolve(&reference)?;
            let noise_seed = noise_seed.unwrap_or(model.seed);
            let mut cells = Vec::with_capacity(lambdas.len());
            for (k, &lambda) in lambdas.iter().enumerate() {
                let seed = if resample_noise { noise_seed + k as u64 } else { noise_seed };
                let edited = toolkit::perturb_seeded(&c, lambda, seed)?;
                cells.push((label("lambda", lambda), edited, model.seed));
            }
            render_cells("perturb-sweep", &model, &loaded, cells, &out)
        }
        Command::InterpSweep { model, a, b, points, out } => {
            let loaded = Loaded::open(&model.checkpoint)?;
            let (ca, cb) = (loaded.resolve(&a)?, loaded.resolve(&b)?);
            // Left to right from A (alpha = 1) to B (alpha = 0).
            let mut cells = Vec::with_capacity(points);
            for k in 0..points {
                let alpha = 1.0 - k as f64 / (points - 1) as f64;
                cells.push((label("alpha", alpha), toolkit::interpolate(&ca, &cb, alpha)?, model.seed));
            }
            render_cells("interp-sweep", &model, &loaded, cells, &out)
        }
        Command::Directions(DirectionsCommand::Pca { rcde, k, out }) => {
            let matrix = load_embeddings(&rcde)?;
            let bank = toolkit::fit_pca_directions(&matrix, k as usize)?;
            bank.save(&out)?;
            for (i, d) in bank.directions.iter().enumerate() {
                let var = d.explained_variance.unwrap_or(0.0);
                eprintln!("V{}: explained variance {var:.6} ({:.2}%)", i + 1, 100.0 * var / bank.total_variance);
            }
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Directions(DirectionsCommand::Apply { model, reference, bank, k, alpha, out }) => {
            let bank = DirectionBank::load(&bank)?;
            let direction = bank.component(k)?.clone();
            let loaded = Loaded::open(&model.checkpoint)?;
            let c = loaded.resolve(&reference)?;
            let mut cells = vec![(label("alpha", 0.0), c.clone(), model.seed)];
            for &a in &alpha {
                cells.push((format!("V{k} {}", label("alpha", a)), toolkit::apply_direction(&c, &direction, a)?, model.seed));
            }
            render_cells("directions apply", &model, &loaded, cells, &out)
        }
        Command::Directions(DirectionsCommand::Attr { model, reference, rcde, attribute, scale, mode, out }) => {
            let matrix = load_embeddings(&rcde)?;
            let loaded = Loaded::open(&model.checkpoint)?;
            let c = loaded.resolve(&reference)?;
            let edited = toolkit::attribute_edit(&c, &matrix, &attribute, scale, mode)?;
            render_cells("directions attr", &model, &loaded, vec![(label("scale", scale), edited, model.seed)], &out)
        }
        Command::Serve { checkpoint, host, port, steps, slots, ui_dir } => {
            let config = rcdm_service::ServiceConfig { default_steps: steps, generation_slots: slots, ui_dir };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            runtime
                .block_on(rcdm_service::serve((host, port).into(), config, checkpoint))
                .map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}
