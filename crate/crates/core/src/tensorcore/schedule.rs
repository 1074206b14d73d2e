use serde::{Deserialize, Serialize};

use super::frame::LatentFrame;
use super::rng::RandomSource;
use crate::error::{Error, Result};

/// Beta schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

/// Per-timestep diffusion tables.
///
/// `alpha_bar[t]` is the cumulative product `prod_{s<=t}(1 - beta_s)` with
/// `alpha_bar[0] = 1`; `betas[t - 1]` is the per-step variance of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of diffusion timesteps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::param(format!(
                "timestep {t} outside [0, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::param("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if timesteps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (timesteps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| match kind {
            ScheduleKind::Linear => lerp(beta_start, beta_end, i),
            ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha_bar.push(1.0);
    for b in &betas {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alpha_bar,
    })
}

/// Diffuse a clean latent to noise level `t`:
/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse(
    x0: &LatentFrame,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RandomSource,
) -> Result<LatentFrame> {
    schedule.check_t(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let eps = rng.gaussian_frame(x0.shape());
    x0.axpby(ab.sqrt(), &eps, (1.0 - ab).sqrt())
}
