//! Forward noising, the ε-prediction loss and the reverse samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::encoders::RepresentationVector;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor3;

/// A point `x_t` of the diffusion chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub data: Tensor3,
    pub t: usize,
}

impl DiffusionSample {
    pub fn clean(data: Tensor3) -> Self {
        Self { data, t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::InvalidArgument(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Draws a standard-normal tensor.
pub fn gaussian(shape: [usize; 3], rng: &mut impl rand::Rng) -> Tensor3 {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor3::new(shape, data).expect("length matches shape")
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·noise`; `t = 0` returns `x0` unchanged.
pub fn forward_sample(
    x0: &DiffusionSample,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor3,
) -> Result<DiffusionSample> {
    schedule.check_timestep(t, 0)?;
    x0.data.ensure_shape(noise)?;
    if t == 0 {
        return Ok(DiffusionSample { data: x0.data.clone(), t: 0 });
    }
    let ab = schedule.alpha_bar(t);
    let (signal, sigma) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.data().iter().zip(noise.data()).map(|(x, e)| signal * x + sigma * e).collect();
    Ok(DiffusionSample { data: Tensor3::new(x0.data.shape(), data)?, t })
}

/// Mean squared error over all elements.
pub fn training_loss(eps_true: &Tensor3, eps_pred: &Tensor3) -> Result<f64> {
    eps_true.ensure_shape(eps_pred)?;
    if eps_true.is_empty() {
        return Ok(0.0);
    }
    Ok(eps_true.sq_dist(eps_pred) / eps_true.len() as f64)
}

/// Gradient of [`training_loss`] with respect to `eps_pred`.
pub fn training_loss_grad(eps_true: &Tensor3, eps_pred: &Tensor3) -> Result<Tensor3> {
    eps_true.ensure_shape(eps_pred)?;
    let scale = 2.0 / eps_true.len().max(1) as f64;
    let data = eps_pred.data().iter().zip(eps_true.data()).map(|(p, e)| scale * (p - e)).collect();
    Tensor3::new(eps_true.shape(), data)
}

fn posterior_update(
    x: &Tensor3,
    eps: &Tensor3,
    alpha: f64,
    beta: f64,
    alpha_bar: f64,
    sigma: f64,
    z: &Tensor3,
) -> Result<Tensor3> {
    let (inv_sqrt_alpha, eps_coef) = (1.0 / alpha.sqrt(), beta / (1.0 - alpha_bar).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .zip(z.data())
        .map(|((x, e), z)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * z)
        .collect();
    Tensor3::new(x.shape(), data)
}

/// One ancestral step `x_t -> x_{t-1}`.
pub fn ddpm_step(
    x_t: &DiffusionSample,
    eps_pred: &Tensor3,
    schedule: &NoiseSchedule,
    z: &Tensor3,
) -> Result<DiffusionSample> {
    let t = x_t.t;
    schedule.check_timestep(t, 1)?;
    x_t.data.ensure_shape(eps_pred)?;
    x_t.data.ensure_shape(z)?;
    let sigma = schedule.posterior_variance(t).max(0.0).sqrt();
    let data = posterior_update(
        &x_t.data,
        eps_pred,
        schedule.alpha(t),
        schedule.beta(t),
        schedule.alpha_bar(t),
        sigma,
        z,
    )?;
    Ok(DiffusionSample { data, t: t - 1 })
}

/// Ancestral step between non-adjacent timesteps (respaced schedule).
fn ddpm_jump(
    x_t: &DiffusionSample,
    eps_pred: &Tensor3,
    schedule: &NoiseSchedule,
    t_next: usize,
    z: &Tensor3,
) -> Result<DiffusionSample> {
    let (ab, ab_next) = (schedule.alpha_bar(x_t.t), schedule.alpha_bar(t_next));
    let alpha = ab / ab_next;
    let beta = 1.0 - alpha;
    let sigma = (beta * (1.0 - ab_next) / (1.0 - ab)).max(0.0).sqrt();
    let data = posterior_update(&x_t.data, eps_pred, alpha, beta, ab, sigma, z)?;
    Ok(DiffusionSample { data, t: t_next })
}

/// Deterministic (η = 0) step from `x_t` to `x_{t_next}`.
pub fn ddim_step(
    x_t: &DiffusionSample,
    eps_pred: &Tensor3,
    schedule: &NoiseSchedule,
    t_next: usize,
) -> Result<DiffusionSample> {
    let t = x_t.t;
    schedule.check_timestep(t, 1)?;
    if t_next >= t {
        return Err(Error::InvalidArgument(format!("t_next {t_next} must be below t {t}")));
    }
    x_t.data.ensure_shape(eps_pred)?;
    let (ab, ab_next) = (schedule.alpha_bar(t), schedule.alpha_bar(t_next));
    let (sab, s1ab) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sab_next, s1ab_next) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    let data = x_t
        .data
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| {
            let x0 = (x - s1ab * e) / sab;
            sab_next * x0 + s1ab_next * e
        })
        .collect();
    Ok(DiffusionSample { data: Tensor3::new(x_t.data.shape(), data)?, t: t_next })
}

/// Generation request shared by every item of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub sampler: Sampler,
    pub steps: usize,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { sampler: Sampler::Ddim, steps: 50 }
    }
}

/// Runs the reverse chain from seeded noise, conditioning every denoiser call.
pub fn sample(
    denoiser: &Denoiser,
    condition: &RepresentationVector,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    steps: usize,
    seed: u64,
) -> Result<DiffusionSample> {
    let mut out =
        sample_batch(denoiser, &[condition], schedule, SamplingOptions { sampler, steps }, &[seed])?;
    Ok(out.remove(0))
}

/// Batched [`sample`]: item `i` uses `conditions[i]` and its own RNG seeded by `seeds[i]`,
/// so each output matches the corresponding single-item call.
pub fn sample_batch(
    denoiser: &Denoiser,
    conditions: &[&RepresentationVector],
    schedule: &NoiseSchedule,
    options: SamplingOptions,
    seeds: &[u64],
) -> Result<Vec<DiffusionSample>> {
    if conditions.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} conditions but {} seeds",
            conditions.len(),
            seeds.len()
        )));
    }
    let cfg = denoiser.config();
    for c in conditions {
        if c.dim() != cfg.cond_dim {
            return Err(Error::Dimension { expected: cfg.cond_dim, got: c.dim() });
        }
    }
    let times = schedule.timestep_sequence(options.steps)?;
    if schedule.len() > cfg.num_timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the denoiser was built for {}",
            schedule.len(),
            cfg.num_timesteps
        )));
    }
    let shape = cfg.sample_shape();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut xs: Vec<DiffusionSample> = rngs
        .iter_mut()
        .map(|rng| DiffusionSample { data: gaussian(shape, rng), t: schedule.len() })
        .collect();

    for (k, &t) in times.iter().enumerate().rev() {
        let t_next = if k == 0 { 0 } else { times[k - 1] };
        let inputs: Vec<&Tensor3> = xs.iter().map(|x| &x.data).collect();
        let ts = vec![t; xs.len()];
        let eps = denoiser.predict_batch(&inputs, &ts, Some(conditions))?;
        xs = xs
            .iter()
            .zip(&eps)
            .zip(rngs.iter_mut())
            .map(|((x, e), rng)| match options.sampler {
                Sampler::Ddim => ddim_step(x, e, schedule, t_next),
                Sampler::Ddpm => {
                    let z = if t_next == 0 { Tensor3::zeros(shape) } else { gaussian(shape, rng) };
                    if t_next + 1 == t {
                        ddpm_step(x, e, schedule, &z)
                    } else {
                        ddpm_jump(x, e, schedule, t_next, &z)
                    }
                }
            })
            .collect::<Result<_>>()?;
    }
    Ok(xs)
}
