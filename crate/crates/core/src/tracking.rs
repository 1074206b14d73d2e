//! Latent-space mask tracking by overlap maximization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{LatentFrame, LatentSequence};

/// Binary `H x W` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            cells,
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::param(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Mean `(x, y)` of the set cells, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.area();
        if n == 0 {
            return None;
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, _) in self.cells.iter().enumerate().filter(|(_, &c)| c) {
            sx += (i % self.width) as f64;
            sy += (i / self.width) as f64;
        }
        Some((sx / n as f64, sy / n as f64))
    }

    /// Single-channel latent holding `1.0` inside the mask and `0.0` outside.
    pub fn to_latent(&self) -> LatentFrame {
        LatentFrame::from_fn((1, self.height, self.width), |_, y, x| {
            if self.get(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Inverse of [`Mask::to_latent`]; any nonzero value counts as set.
    pub(crate) fn from_latent_unchecked(f: &LatentFrame) -> Mask {
        Mask {
            height: f.height(),
            width: f.width(),
            cells: f.plane(0).iter().map(|&v| v != 0.0).collect(),
        }
    }
}

/// Intersection over union; two empty masks score 1, exactly one empty scores 0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::param(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Class-agnostic segmentation of a latent frame.
pub trait Segmenter {
    fn segment(&self, x: &LatentFrame) -> Result<Mask>;
}

impl<F> Segmenter for F
where
    F: Fn(&LatentFrame) -> Result<Mask>,
{
    fn segment(&self, x: &LatentFrame) -> Result<Mask> {
        self(x)
    }
}

/// Threshold on the per-pixel mean of absolute channel values, optionally
/// keeping only the largest 4-connected component.
pub fn threshold_segment(x: &LatentFrame, theta: f64, largest_component: bool) -> Mask {
    let (_, h, w) = x.shape();
    let mut mag = vec![0.0; h * w];
    for c in 0..x.channels() {
        for (m, v) in mag.iter_mut().zip(x.plane(c)) {
            *m += v.abs();
        }
    }
    let k = x.channels() as f64;
    let cells: Vec<bool> = mag.iter().map(|m| m / k > theta).collect();
    let mask = Mask {
        height: h,
        width: w,
        cells,
    };
    if largest_component {
        keep_largest_component(&mask)
    } else {
        mask
    }
}

fn keep_largest_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.cells[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = Vec::new();
        label[start] = start;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.cells[j] && label[j] == usize::MAX {
                    label[j] = start;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        // Ties keep the first component in raster order.
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut out = Mask::empty(h, w);
    for i in best {
        out.cells[i] = true;
    }
    out
}

/// [`threshold_segment`] as a [`Segmenter`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSegmenter {
    pub theta: f64,
    pub largest_component: bool,
}

impl Segmenter for ThresholdSegmenter {
    fn segment(&self, x: &LatentFrame) -> Result<Mask> {
        Ok(threshold_segment(x, self.theta, self.largest_component))
    }
}

/// Per-frame masks plus the link decisions that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrack {
    pub masks: Vec<Mask>,
    /// `true` where the fresh segmentation was accepted, `false` where the
    /// previous mask was retained.
    pub linked: Vec<bool>,
    /// IoU of each fresh segmentation against the previous tracked mask
    /// (`1.0` for frame 0).
    pub ious: Vec<f64>,
    pub tau: f64,
    /// Frame 0 segmented to an empty mask.
    pub degenerate: bool,
}

impl MaskTrack {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// JSON sidecar `{tau, linked, degenerate}`.
    pub fn sidecar(&self) -> TrackSidecar {
        TrackSidecar {
            tau: self.tau,
            linked: self.linked.clone(),
            degenerate: self.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSidecar {
    pub tau: f64,
    pub linked: Vec<bool>,
    pub degenerate: bool,
}

/// Online form of the tracker: feed one segmentation per frame.
#[derive(Debug, Clone)]
pub struct MaskTracker {
    track: MaskTrack,
}

impl MaskTracker {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::param(format!("IoU threshold tau must be in [0, 1], got {tau}")));
        }
        Ok(Self {
            track: MaskTrack {
                masks: Vec::new(),
                linked: Vec::new(),
                ious: Vec::new(),
                tau,
                degenerate: false,
            },
        })
    }

    /// Link `candidate` to the previous mask: accepted iff `IoU > tau`,
    /// otherwise the previous mask is retained. Returns the tracked mask and
    /// whether the candidate was accepted.
    pub fn push(&mut self, candidate: Mask) -> Result<(&Mask, bool)> {
        let t = &mut self.track;
        match t.masks.last() {
            None => {
                t.degenerate = candidate.is_empty();
                t.masks.push(candidate);
                t.linked.push(true);
                t.ious.push(1.0);
            }
            Some(prev) => {
                let score = iou(&candidate, prev)?;
                let accept = score > t.tau;
                let next = if accept { candidate } else { prev.clone() };
                t.masks.push(next);
                t.linked.push(accept);
                t.ious.push(score);
            }
        }
        Ok((t.masks.last().unwrap(), *t.linked.last().unwrap()))
    }

    pub fn track(&self) -> &MaskTrack {
        &self.track
    }

    pub fn finish(self) -> MaskTrack {
        self.track
    }
}

/// Segment every frame and link adjacent frames by overlap maximization.
pub fn track_masks(latents: &LatentSequence, seg: &dyn Segmenter, tau: f64) -> Result<MaskTrack> {
    let mut tracker = MaskTracker::new(tau)?;
    let (_, h, w) = latents.shape();
    for x in latents {
        let m = seg.segment(x)?;
        if (m.height, m.width) != (h, w) {
            return Err(Error::param(format!(
                "segmenter returned a {}x{} mask for a {h}x{w} latent",
                m.height, m.width
            )));
        }
        tracker.push(m)?;
    }
    Ok(tracker.finish())
}
