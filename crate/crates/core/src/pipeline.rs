//! FIFO diagonal denoising with a one-shot latent injection per frame.
//!
//! The queue holds one slot per denoising step, slot `k` sitting at grid
//! timestep `t_{k+1}`. Every [`FifoQueue::step`] advances all slots one grid
//! step with momentum-corrected DDIM, applies the injection to slots that have
//! just reached `t' `, pops the now-clean head and pushes a new tail at `T`.

use std::collections::VecDeque;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blending::{blend_region, gamma_residual, reinit_tail_noise, BlendParams, ResidualParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scheduler::{ddim_invert, momentum_step, uniform_grid, Denoiser, MomentumState};
use crate::tensorcore::{forward_diffuse, lts, LatentFrame, LatentSequence, NoiseSchedule, RandomSource, Shape};
use crate::tracking::{Mask, MaskTrack, MaskTracker, Segmenter};

// Per-frame substream indices under `root.child(frame)`.
const STREAM_STEP: u64 = 0;
const STREAM_COND: u64 = 1;
const STREAM_RESIDUAL: u64 = 2;
const STREAM_INIT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub eta: f64,
    pub beta: f64,
    pub lambda: f64,
    pub kappa0: f64,
}

impl SamplerParams {
    fn fresh_state(&self, shape: Shape, total: usize) -> Result<MomentumState> {
        MomentumState::new(shape, self.beta, self.lambda, self.kappa0, total)
    }
}

/// One injection event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub frame: usize,
    /// Timestep of the slot when the edit was applied.
    pub t: usize,
    pub linked: bool,
    pub iou: f64,
    pub mask_area: usize,
}

/// What to inject, where in the schedule, and the log of edits applied.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub t_prime: usize,
    pub cond_latent: LatentFrame,
    pub blend: BlendParams,
    pub residual: ResidualParams,
    /// Frames at or past this index are left alone (they will never be emitted).
    pub frame_limit: Option<usize>,
    pub edits: Vec<EditRecord>,
}

impl InjectionPlan {
    pub fn new(
        t_prime: usize,
        cond_latent: LatentFrame,
        blend: BlendParams,
        residual: ResidualParams,
    ) -> Result<Self> {
        if t_prime == 0 {
            return Err(Error::param("injection timestep must be > 0"));
        }
        Ok(Self {
            t_prime,
            cond_latent,
            blend,
            residual,
            frame_limit: None,
            edits: Vec::new(),
        })
    }
}

/// Mask handed to the injection for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecision {
    pub mask: Mask,
    pub linked: bool,
    pub iou: f64,
}

/// Supplies masks to frames as they become due for injection, in frame order.
pub trait MaskSource {
    /// `None` means no mask is available for this frame.
    fn mask_for(&mut self, frame: usize, latent: &LatentFrame) -> Result<Option<MaskDecision>>;

    /// Masks handed out so far.
    fn track(&self) -> MaskTrack;
}

/// Segment each due latent and link it to the previous frame's mask.
pub struct TrackedSegmentation<'a> {
    segmenter: &'a dyn Segmenter,
    tracker: MaskTracker,
}

impl<'a> TrackedSegmentation<'a> {
    pub fn new(segmenter: &'a dyn Segmenter, tau: f64) -> Result<Self> {
        Ok(Self {
            segmenter,
            tracker: MaskTracker::new(tau)?,
        })
    }
}

impl MaskSource for TrackedSegmentation<'_> {
    fn mask_for(&mut self, _frame: usize, latent: &LatentFrame) -> Result<Option<MaskDecision>> {
        let m = self.segmenter.segment(latent)?;
        if (m.height(), m.width()) != (latent.height(), latent.width()) {
            return Err(Error::param("segmenter output does not match latent size"));
        }
        let (mask, linked) = self.tracker.push(m)?;
        let mask = mask.clone();
        let iou = *self.tracker.track().ious.last().unwrap();
        Ok(Some(MaskDecision { mask, linked, iou }))
    }

    fn track(&self) -> MaskTrack {
        self.tracker.track().clone()
    }
}

/// Masks given up front, indexed by frame.
pub struct FixedMasks {
    masks: Vec<Mask>,
    used: Vec<Mask>,
}

impl FixedMasks {
    pub fn new(masks: Vec<Mask>) -> Self {
        Self {
            masks,
            used: Vec::new(),
        }
    }
}

impl MaskSource for FixedMasks {
    fn mask_for(&mut self, frame: usize, _latent: &LatentFrame) -> Result<Option<MaskDecision>> {
        Ok(self.masks.get(frame).cloned().map(|mask| {
            self.used.push(mask.clone());
            MaskDecision {
                mask,
                linked: true,
                iou: 1.0,
            }
        }))
    }

    fn track(&self) -> MaskTrack {
        let n = self.used.len();
        MaskTrack {
            masks: self.used.clone(),
            linked: vec![true; n],
            ious: vec![1.0; n],
            tau: 0.0,
            degenerate: self.used.first().is_some_and(Mask::is_empty),
        }
    }
}

/// Per-slot step log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub frame: usize,
    pub t: usize,
    pub kappa: f64,
    pub v_norm: f64,
}

#[derive(Debug, Clone)]
struct Slot {
    frame: usize,
    level: usize,
    latent: LatentFrame,
    momentum: MomentumState,
    noise: RandomSource,
    edited: bool,
}

/// How the initial queue is filled.
pub enum QueueSource<'a> {
    /// One inversion trajectory per frame (each `queue_len + 1` long, on the
    /// queue grid); slot `k` takes frame `k`'s entry at grid index `k + 1`.
    Trajectories(&'a [LatentSequence]),
    /// Unit Gaussian noise of the given shape in every slot.
    Noise(Shape),
}

#[derive(Debug, Clone)]
pub struct FifoQueue {
    slots: VecDeque<Slot>,
    grid: Vec<usize>,
    root: RandomSource,
    sampler: SamplerParams,
    cutoff: f64,
    next_frame: usize,
    steps_taken: usize,
    last_emitted: Option<LatentFrame>,
}

/// A frame leaving the head of the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Emitted {
    pub frame: usize,
    pub latent: LatentFrame,
    pub edited: bool,
}

impl FifoQueue {
    pub fn init(
        source: QueueSource<'_>,
        schedule: &NoiseSchedule,
        queue_len: usize,
        sampler: SamplerParams,
        cutoff: f64,
        root: RandomSource,
    ) -> Result<Self> {
        if !(0.0..=0.5).contains(&cutoff) {
            return Err(Error::param(format!("cutoff must be in [0, 0.5], got {cutoff}")));
        }
        let grid = uniform_grid(schedule.timesteps(), queue_len)?;
        let total = schedule.timesteps();
        let mut slots = VecDeque::with_capacity(queue_len);
        for k in 0..queue_len {
            let latent = match &source {
                QueueSource::Trajectories(trajs) => {
                    let traj = trajs.get(k).ok_or_else(|| {
                        Error::param(format!(
                            "queue of length {queue_len} needs {queue_len} source frames, got {}",
                            trajs.len()
                        ))
                    })?;
                    if traj.len() != grid.len() {
                        return Err(Error::param(format!(
                            "trajectory {k} has {} entries, queue grid needs {}",
                            traj.len(),
                            grid.len()
                        )));
                    }
                    traj.frames()[k + 1].clone()
                }
                QueueSource::Noise(shape) => root.child(k as u64).child(STREAM_INIT).gaussian_frame(*shape),
            };
            slots.push_back(Slot {
                frame: k,
                level: k + 1,
                momentum: sampler.fresh_state(latent.shape(), total)?,
                noise: root.child(k as u64).child(STREAM_STEP),
                latent,
                edited: false,
            });
        }
        Ok(Self {
            slots,
            grid,
            root,
            sampler,
            cutoff,
            next_frame: queue_len,
            steps_taken: 0,
            last_emitted: None,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// `(frame, timestep, latent)` per slot, head first.
    pub fn slots(&self) -> impl Iterator<Item = (usize, usize, &LatentFrame)> {
        self.slots.iter().map(|s| (s.frame, self.grid[s.level], &s.latent))
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.slots.iter().map(|s| self.grid[s.level]).collect()
    }

    pub fn last_emitted(&self) -> Option<&LatentFrame> {
        self.last_emitted.as_ref()
    }

    /// Advance every slot one grid step, inject where due, emit the head.
    pub fn step(
        &mut self,
        denoiser: &dyn Denoiser,
        schedule: &NoiseSchedule,
        mut injection: Option<(&mut InjectionPlan, &mut dyn MaskSource)>,
        mut trace: Option<&mut Vec<StepTrace>>,
    ) -> Result<Option<Emitted>> {
        let step_index = self.steps_taken;
        for slot in self.slots.iter_mut() {
            let (t, t_prev) = (self.grid[slot.level], self.grid[slot.level - 1]);
            let out = momentum_step(
                &slot.latent,
                t,
                t_prev,
                denoiser,
                schedule,
                &mut slot.momentum,
                self.sampler.eta,
                &mut slot.noise,
            )?;
            slot.latent = out.x_prev;
            slot.level -= 1;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(StepTrace {
                    step: step_index,
                    frame: slot.frame,
                    t,
                    kappa: out.kappa_used,
                    v_norm: slot.momentum.velocity().norm_l2(),
                });
            }
        }

        if let Some((plan, masks)) = injection.as_mut() {
            for slot in self.slots.iter_mut() {
                let t = self.grid[slot.level];
                if slot.edited || t > plan.t_prime || plan.frame_limit.is_some_and(|n| slot.frame >= n) {
                    continue;
                }
                let decision = masks
                    .mask_for(slot.frame, &slot.latent)?
                    .ok_or(Error::DegenerateTrack { frame: slot.frame })?;
                let frame_rng = self.root.child(slot.frame as u64);
                let x_cond = forward_diffuse(&plan.cond_latent, t, schedule, &mut frame_rng.child(STREAM_COND))?;
                let mixed = blend_region(&slot.latent, &x_cond, &decision.mask, &plan.blend)?;
                slot.latent = gamma_residual(&mixed, &plan.residual, &mut frame_rng.child(STREAM_RESIDUAL))?;
                slot.edited = true;
                plan.edits.push(EditRecord {
                    frame: slot.frame,
                    t,
                    linked: decision.linked,
                    iou: decision.iou,
                    mask_area: decision.mask.area(),
                });
            }
        }

        self.steps_taken += 1;
        if self.slots.front().is_none_or(|s| s.level != 0) {
            return Ok(None);
        }
        let head = self.slots.pop_front().unwrap();
        if !head.latent.is_finite() {
            return Err(Error::NonFinite(format!("emitted frame {}", head.frame)));
        }
        self.last_emitted = Some(head.latent.clone());

        let frame = self.next_frame;
        self.next_frame += 1;
        let frame_rng = self.root.child(frame as u64);
        let mut init_rng = frame_rng.child(STREAM_INIT);
        let latent = match &self.last_emitted {
            Some(recent) => reinit_tail_noise(recent, schedule, self.cutoff, &mut init_rng)?,
            None => init_rng.gaussian_frame(head.latent.shape()),
        };
        self.slots.push_back(Slot {
            frame,
            level: self.grid.len() - 1,
            momentum: self.sampler.fresh_state(latent.shape(), schedule.timesteps())?,
            noise: frame_rng.child(STREAM_STEP),
            latent,
            edited: false,
        });

        Ok(Some(Emitted {
            frame: head.frame,
            latent: head.latent,
            edited: head.edited,
        }))
    }
}

/// Inputs of a mixing run, already loaded.
#[derive(Debug, Clone)]
pub struct MixInputs {
    pub source: Option<LatentSequence>,
    pub cond: LatentFrame,
    pub masks: Option<Vec<Mask>>,
}

impl MixInputs {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let cond_path = config
            .io
            .cond
            .as_ref()
            .ok_or_else(|| Error::validation("io.cond", "a reference latent is required"))?;
        let cond = lts::read_latents(cond_path)?.first().clone();
        let source = config.io.source.as_deref().map(lts::read_latents).transpose()?;
        let masks = config.io.masks.as_deref().map(lts::read_masks).transpose()?;
        Ok(Self { source, cond, masks })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub latent_shape: [usize; 3],
    /// Edits are applied after the step that brings a slot to `t <= t_prime`.
    pub edit_order: String,
    pub mask_mode: String,
    pub degenerate_track: bool,
    pub emitted_frames: usize,
    pub edits: Vec<EditRecord>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct MixOutput {
    pub frames: LatentSequence,
    pub track: MaskTrack,
    pub manifest: RunManifest,
    pub trace: Vec<StepTrace>,
}

/// Run the full mixing pipeline: invert the source (if any), fill the queue,
/// and step it until `config.queue.frames` frames have been emitted.
pub fn run_semantic_mix(
    config: &RunConfig,
    inputs: &MixInputs,
    denoiser: &dyn Denoiser,
    segmenter: &dyn Segmenter,
    collect_trace: bool,
) -> Result<MixOutput> {
    config.validate()?;
    let schedule = config.schedule()?;
    let shape = inputs.cond.shape();
    let queue_len = config.queue.length;

    let trajectories = match &inputs.source {
        Some(src) => {
            if src.shape() != shape {
                return Err(Error::Shape {
                    expected: shape,
                    got: src.shape(),
                });
            }
            let mut trajs = Vec::with_capacity(queue_len);
            for x0 in src.iter().take(queue_len) {
                trajs.push(ddim_invert(x0, denoiser, &schedule, queue_len)?);
            }
            Some(trajs)
        }
        None => None,
    };
    let source = match &trajectories {
        Some(t) => QueueSource::Trajectories(t),
        None => QueueSource::Noise(shape),
    };
    let sampler = SamplerParams {
        eta: config.sampler.eta,
        beta: config.sampler.beta,
        lambda: config.sampler.lambda,
        kappa0: config.sampler.kappa0,
    };
    let root = RandomSource::new(config.seed);
    let mut queue = FifoQueue::init(source, &schedule, queue_len, sampler, config.injection.cutoff, root)?;

    let mut plan = InjectionPlan::new(
        config.injection.t_prime,
        inputs.cond.clone(),
        BlendParams::new(config.injection.strength)?,
        ResidualParams::new(config.injection.gamma_res)?,
    )?;
    plan.frame_limit = Some(config.queue.frames);
    let mut tracked;
    let mut fixed;
    let (mask_source, mask_mode): (&mut dyn MaskSource, &str) = match &inputs.masks {
        Some(m) => {
            fixed = FixedMasks::new(m.clone());
            (&mut fixed, "given")
        }
        None => {
            tracked = TrackedSegmentation::new(segmenter, config.injection.tau)?;
            (&mut tracked, "tracked")
        }
    };

    let mut trace = Vec::new();
    let mut emitted = Vec::with_capacity(config.queue.frames);
    while emitted.len() < config.queue.frames {
        let tr = collect_trace.then_some(&mut trace);
        if let Some(e) = queue.step(denoiser, &schedule, Some((&mut plan, &mut *mask_source)), tr)? {
            emitted.push(e.latent);
        }
    }
    let track = mask_source.track();
    let manifest = RunManifest {
        config: config.clone(),
        latent_shape: [shape.0, shape.1, shape.2],
        edit_order: "post_step".into(),
        mask_mode: mask_mode.into(),
        degenerate_track: track.degenerate,
        emitted_frames: emitted.len(),
        edits: plan.edits,
        outputs: Vec::new(),
    };
    Ok(MixOutput {
        frames: LatentSequence::new(emitted)?,
        track,
        manifest,
        trace,
    })
}
