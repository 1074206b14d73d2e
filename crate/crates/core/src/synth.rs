//! Analytic denoisers and synthetic scenes for exercising the pipeline without
//! pretrained networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::Denoiser;
use crate::tensorcore::{LatentFrame, LatentSequence, NoiseSchedule};
use crate::tracking::{Mask, MaskTrack};

/// Denoiser that knows the clean latent: `eps(x_t, t) = (x_t - sqrt(ab_t) x0*) / sqrt(1 - ab_t)`.
///
/// With it, `predict_x0` recovers `x0*` from any `x_t`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    x0_star: LatentFrame,
    alpha_bar: Vec<f64>,
}

impl OracleDenoiser {
    pub fn new(x0_star: LatentFrame, schedule: &NoiseSchedule) -> Result<Self> {
        if !x0_star.is_finite() {
            return Err(Error::NonFinite("oracle clean latent".into()));
        }
        Ok(Self {
            x0_star,
            alpha_bar: schedule.alpha_bars().to_vec(),
        })
    }

    pub fn target(&self) -> &LatentFrame {
        &self.x0_star
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_eps(&self, x_t: &LatentFrame, t: usize) -> Result<LatentFrame> {
        if t == 0 {
            return Err(Error::Domain("oracle noise estimate is undefined at t = 0".into()));
        }
        let ab = *self
            .alpha_bar
            .get(t)
            .ok_or_else(|| Error::param(format!("timestep {t} beyond the oracle's schedule")))?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(&self.x0_star, |x, x0| (x - sa * x0) / sb)
    }
}

/// Exact MMSE denoiser for data drawn elementwise from `N(mean, var)`:
/// `eps = sqrt(1 - ab) (x - sqrt(ab) mean) / (ab var + 1 - ab)`.
///
/// Unlike the oracle it keeps whatever content `x_t` carries, so edits made
/// mid-trajectory survive to the clean output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaussianPriorDenoiser {
    pub mean: f64,
    pub var: f64,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

impl GaussianPriorDenoiser {
    pub fn new(mean: f64, var: f64, schedule: &NoiseSchedule) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(Error::param(format!("prior needs finite mean and var > 0, got ({mean}, {var})")));
        }
        Ok(Self {
            mean,
            var,
            alpha_bar: schedule.alpha_bars().to_vec(),
        })
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn predict_eps(&self, x_t: &LatentFrame, t: usize) -> Result<LatentFrame> {
        let ab = *self
            .alpha_bar
            .get(t)
            .ok_or_else(|| Error::param(format!("timestep {t} beyond the prior's schedule")))?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let denom = ab * self.var + 1.0 - ab;
        let mean = self.mean;
        Ok(x_t.map(|x| sb * (x - sa * mean) / denom))
    }
}

/// A bright square (value 1.0 in every channel) translating over a zero
/// background, with its ground-truth masks. Positions clamp at the borders.
pub fn moving_square_scene(
    frames: usize,
    grid: usize,
    square: usize,
    velocity: (i64, i64),
    channels: usize,
) -> Result<(LatentSequence, MaskTrack)> {
    if square == 0 || square >= grid {
        return Err(Error::param(format!("square size {square} must be in [1, grid={grid})")));
    }
    if frames == 0 || channels == 0 {
        return Err(Error::param("scene needs at least one frame and one channel"));
    }
    let max = (grid - square) as i64;
    let start = (0i64, max / 2);
    let mut latents = Vec::with_capacity(frames);
    let mut masks = Vec::with_capacity(frames);
    for k in 0..frames as i64 {
        let x0 = (start.0 + k * velocity.0).clamp(0, max) as usize;
        let y0 = (start.1 + k * velocity.1).clamp(0, max) as usize;
        let inside = |y: usize, x: usize| (y0..y0 + square).contains(&y) && (x0..x0 + square).contains(&x);
        latents.push(LatentFrame::from_fn((channels, grid, grid), |_, y, x| {
            if inside(y, x) {
                1.0
            } else {
                0.0
            }
        }));
        masks.push(Mask::from_fn(grid, grid, inside));
    }
    let n = masks.len();
    Ok((
        LatentSequence::new(latents)?,
        MaskTrack {
            masks,
            linked: vec![true; n],
            ious: vec![1.0; n],
            tau: 0.0,
            degenerate: false,
        },
    ))
}

/// A reference-object latent distinct from the scene's square: a negative
/// horizontal ramp from -1.5 to -0.5 in every channel.
pub fn reference_pattern(channels: usize, grid: usize) -> LatentFrame {
    let span = (grid.max(2) - 1) as f64;
    LatentFrame::from_fn((channels, grid, grid), |_, _, x| -1.5 + x as f64 / span)
}

/// Stand-in visual embedding: channel-mean of each `patches x patches` cell,
/// unit-normalized.
pub fn patch_embedding_proxy(frame: &LatentFrame, patches: usize) -> Result<Vec<f64>> {
    let (_, h, w) = frame.shape();
    if patches == 0 || h % patches != 0 || w % patches != 0 {
        return Err(Error::param(format!(
            "patch count {patches} must divide the {h}x{w} grid"
        )));
    }
    let (ph, pw) = (h / patches, w / patches);
    let mean = frame.channel_mean();
    let mut v = vec![0.0; patches * patches];
    for y in 0..h {
        for x in 0..w {
            v[(y / ph) * patches + x / pw] += mean[y * w + x];
        }
    }
    let cell = (ph * pw) as f64;
    v.iter_mut().for_each(|e| *e /= cell);
    let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("proxy embedding of an all-zero frame".into()));
    }
    v.iter_mut().for_each(|e| *e /= norm);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine_sim;
    use crate::scheduler::predict_x0;
    use crate::tensorcore::{forward_diffuse, make_schedule, RandomSource, ScheduleKind};
    use crate::tracking::iou;

    fn sched() -> NoiseSchedule {
        make_schedule(100, 0.00085, 0.012, ScheduleKind::ScaledLinear).unwrap()
    }

    #[test]
    fn oracle_recovers_noise_and_clean_latent() {
        let s = sched();
        let mut rng = RandomSource::new(3);
        let x0 = rng.gaussian_frame((4, 8, 8));
        let oracle = OracleDenoiser::new(x0.clone(), &s).unwrap();
        for t in [1, 37, 100] {
            let mut probe = RandomSource::new(t as u64);
            let xt = forward_diffuse(&x0, t, &s, &mut probe.clone()).unwrap();
            let eps = probe.gaussian_frame(x0.shape());
            let est = oracle.predict_eps(&xt, t).unwrap();
            assert!(est.max_abs_diff(&eps).unwrap() < 1e-9, "t={t}");
            let arbitrary = rng.gaussian_frame(x0.shape());
            let e2 = oracle.predict_eps(&arbitrary, t).unwrap();
            assert!(predict_x0(&arbitrary, t, &e2, &s).unwrap().max_abs_diff(&x0).unwrap() < 1e-9);
        }
        assert!(matches!(oracle.predict_eps(&x0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_prior_matches_posterior_mean() {
        let s = sched();
        let d = GaussianPriorDenoiser::new(0.5, 2.0, &s).unwrap();
        let x = LatentFrame::filled((1, 1, 1), 0.9);
        let t = 60;
        let ab = s.alpha_bar(t);
        let eps = d.predict_eps(&x, t).unwrap();
        let x0 = predict_x0(&x, t, &eps, &s).unwrap().data()[0];
        // Posterior mean of x0 given x = sqrt(ab) x0 + sqrt(1 - ab) n.
        let want = (ab.sqrt() * 2.0 * 0.9 + (1.0 - ab) * 0.5) / (ab * 2.0 + 1.0 - ab);
        assert!((x0 - want).abs() < 1e-12);
    }

    #[test]
    fn static_scene_is_constant() {
        let (seq, gt) = moving_square_scene(5, 8, 3, (0, 0), 4).unwrap();
        assert!(seq.iter().all(|f| f == seq.first()));
        assert!(gt.masks.iter().all(|m| *m == gt.masks[0]));
    }

    #[test]
    fn square_moves_then_clamps() {
        let (_, gt) = moving_square_scene(16, 8, 3, (1, 0), 4).unwrap();
        let xs: Vec<f64> = gt.masks.iter().map(|m| m.centroid().unwrap().0).collect();
        for (k, x) in xs.iter().enumerate() {
            assert_eq!(*x, (k.min(5) + 1) as f64);
        }
        assert!((iou(&gt.masks[0], &gt.masks[1]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scene_rejects_oversized_square() {
        assert!(moving_square_scene(2, 4, 4, (0, 0), 1).is_err());
    }

    #[test]
    fn proxy_embedding_properties() {
        let c = LatentFrame::filled((2, 8, 8), 0.3);
        let e = patch_embedding_proxy(&c, 4).unwrap();
        assert!(e.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let f = RandomSource::new(2).gaussian_frame((4, 8, 8));
        let a = patch_embedding_proxy(&f, 4).unwrap();
        let neg = patch_embedding_proxy(&f.scale(-1.0), 4).unwrap();
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(patch_embedding_proxy(&f, 3).is_err());
    }
}
