//! Run configuration: JSON schema, defaults and range validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::Denoiser;
use crate::synth::GaussianPriorDenoiser;
use crate::tensorcore::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::tracking::ThresholdSegmenter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            kind: ScheduleKind::ScaledLinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub eta: f64,
    /// Momentum decay.
    pub beta: f64,
    /// Direction scale.
    pub lambda: f64,
    /// Base correction weight; useful range is [1, 2].
    pub kappa0: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            beta: 0.9,
            lambda: 1.0,
            kappa0: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub t_prime: usize,
    /// Conditioning strength; in-mask weight is `min(1, strength / 2)`.
    pub strength: f64,
    pub gamma_res: f64,
    pub tau: f64,
    /// Tail-noise low-pass cutoff (normalized frequency).
    pub cutoff: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            t_prime: 300,
            strength: 2.0,
            gamma_res: 0.05,
            tau: 0.5,
            cutoff: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    /// Queue length, equal to the number of denoising steps.
    pub length: usize,
    /// Frames to emit.
    pub frames: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            length: 50,
            frames: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    GaussianPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub mean: f64,
    pub var: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::GaussianPrior,
            mean: 0.0,
            var: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub theta: f64,
    pub largest_component: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            largest_component: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Source video latents (LTS); fresh noise when absent.
    pub source: Option<PathBuf>,
    /// Reference-object clean latent (LTS, first frame used).
    pub cond: Option<PathBuf>,
    /// Precomputed masks (LTS mask payload); segmentation + tracking when absent.
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub injection: InjectionConfig,
    pub queue: QueueConfig,
    pub denoiser: DenoiserConfig,
    pub segmenter: SegmenterConfig,
    pub io: IoConfig,
}

fn in_range(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(Error::validation(field, format!("must be in [{lo}, {hi}], got {v}")));
    }
    Ok(())
}

fn at_least(field: &str, v: f64, lo: f64) -> Result<()> {
    if !(v >= lo && v.is_finite()) {
        return Err(Error::validation(field, format!("must be finite and >= {lo}, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.timesteps < 1 {
            return Err(Error::validation("schedule.timesteps", "must be >= 1"));
        }
        if !(s.beta_start > 0.0 && s.beta_start < 1.0) {
            return Err(Error::validation(
                "schedule.beta_start",
                format!("must be in (0, 1), got {}", s.beta_start),
            ));
        }
        if !(s.beta_end >= s.beta_start && s.beta_end < 1.0) {
            return Err(Error::validation(
                "schedule.beta_end",
                format!("must be in [beta_start, 1), got {}", s.beta_end),
            ));
        }

        let p = &self.sampler;
        in_range("sampler.eta", p.eta, 0.0, 1.0)?;
        in_range("sampler.beta", p.beta, 0.0, 1.0)?;
        at_least("sampler.lambda", p.lambda, 0.0)?;
        at_least("sampler.kappa0", p.kappa0, 0.0)?;

        let i = &self.injection;
        if i.t_prime == 0 || i.t_prime >= s.timesteps {
            return Err(Error::validation(
                "injection.t_prime",
                format!("must be in (0, {}), got {}", s.timesteps, i.t_prime),
            ));
        }
        at_least("injection.strength", i.strength, 0.0)?;
        at_least("injection.gamma_res", i.gamma_res, 0.0)?;
        in_range("injection.tau", i.tau, 0.0, 1.0)?;
        in_range("injection.cutoff", i.cutoff, 0.0, 0.5)?;

        let q = &self.queue;
        if q.length < 1 || q.length > s.timesteps {
            return Err(Error::validation(
                "queue.length",
                format!("must be in [1, {}], got {}", s.timesteps, q.length),
            ));
        }
        if q.frames < 1 {
            return Err(Error::validation("queue.frames", "must be >= 1"));
        }

        let d = &self.denoiser;
        if !d.mean.is_finite() {
            return Err(Error::validation("denoiser.mean", "must be finite"));
        }
        if !(d.var > 0.0 && d.var.is_finite()) {
            return Err(Error::validation("denoiser.var", format!("must be > 0, got {}", d.var)));
        }
        if !self.segmenter.theta.is_finite() {
            return Err(Error::validation("segmenter.theta", "must be finite"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.timesteps, s.beta_start, s.beta_end, s.kind)
    }

    pub fn build_denoiser(&self, schedule: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
        match self.denoiser.kind {
            DenoiserKind::GaussianPrior => Ok(Box::new(GaussianPriorDenoiser::new(
                self.denoiser.mean,
                self.denoiser.var,
                schedule,
            )?)),
        }
    }

    pub fn segmenter(&self) -> ThresholdSegmenter {
        ThresholdSegmenter {
            theta: self.segmenter.theta,
            largest_component: self.segmenter.largest_component,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse and validate a JSON run configuration; absent fields take their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        Error::validation(field_hint(&msg), msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn field_hint(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .map_or_else(|| "config".to_string(), str::to_string)
}
