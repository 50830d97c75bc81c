use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Parameters from which a [`NoiseSchedule`] is rebuilt deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Per-timestep variance tables for `t = 1..=T`.
///
/// Index `t - 1` of each table holds the value for timestep `t`; `alpha_bar(0)`
/// is defined as 1 so that timestep 0 denotes clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Offset used by the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_spec(ScheduleSpec { kind, timesteps, beta_start, beta_end })
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear, timesteps, beta_start, beta_end)
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let t_max = spec.timesteps;
        if t_max < 1 {
            return Err(Error::Schedule(format!("T must be at least 1, got {t_max}")));
        }
        let betas: Vec<f64> = match spec.kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (spec.beta_start, spec.beta_end);
                if !(lo > 0.0 && lo < 1.0 && hi > 0.0 && hi < 1.0) {
                    return Err(Error::Schedule(format!(
                        "beta bounds must lie in (0, 1), got [{lo}, {hi}]"
                    )));
                }
                if lo > hi {
                    return Err(Error::Schedule(format!("beta_start {lo} exceeds beta_end {hi}")));
                }
                if t_max == 1 {
                    vec![lo]
                } else {
                    let span = (t_max - 1) as f64;
                    (0..t_max).map(|i| lo + (hi - lo) * i as f64 / span).collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max).map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-12, COSINE_MAX_BETA)).collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { spec, betas, alphas, alpha_bars })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative signal retention; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance of the ancestral step from `t` to `t - 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    pub fn check_timestep(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.len() {
            return Err(Error::Timestep { t, min, max: self.len() });
        }
        Ok(())
    }

    /// `steps` increasing timesteps ending at `T`, roughly evenly spaced.
    pub fn timestep_sequence(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(Error::InvalidArgument(format!(
                "sampling steps must be in 1..={t_max}, got {steps}"
            )));
        }
        Ok((1..=steps).map(|k| (k * t_max).div_ceil(steps)).collect())
    }
}
