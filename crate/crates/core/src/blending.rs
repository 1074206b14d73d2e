//! Masked latent blending, residual noise and low-frequency tail noise.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{forward_diffuse, LatentFrame, NoiseSchedule, RandomSource};
use crate::tracking::Mask;

/// Conditioning strength and the in-mask interpolation weight derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendParams {
    pub strength: f64,
}

impl BlendParams {
    pub fn new(strength: f64) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::param(format!("conditioning strength must be >= 0, got {strength}")));
        }
        Ok(Self { strength })
    }

    /// `w = min(1, strength / 2)`; strength 2 is pure replacement inside the mask.
    pub fn weight(&self) -> f64 {
        (self.strength / 2.0).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualParams {
    pub gamma: f64,
}

impl ResidualParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::param(format!("residual gamma must be >= 0, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

/// Outside the mask the latent is untouched; inside it becomes
/// `(1 - w) * x_t + w * x_cond`.
pub fn blend_region(
    x_t: &LatentFrame,
    x_cond: &LatentFrame,
    mask: &Mask,
    params: &BlendParams,
) -> Result<LatentFrame> {
    blend_with_weight(x_t, x_cond, mask, params.weight())
}

pub fn blend_with_weight(
    x_t: &LatentFrame,
    x_cond: &LatentFrame,
    mask: &Mask,
    w: f64,
) -> Result<LatentFrame> {
    x_t.ensure_same_shape(x_cond)?;
    if (mask.height(), mask.width()) != (x_t.height(), x_t.width()) {
        return Err(Error::param(format!(
            "mask {}x{} does not match latent {}x{}",
            mask.height(),
            mask.width(),
            x_t.height(),
            x_t.width()
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::param(format!("blend weight must be in [0, 1], got {w}")));
    }
    let mut out = x_t.clone();
    if w == 0.0 {
        return Ok(out);
    }
    let hw = x_t.height() * x_t.width();
    for c in 0..x_t.channels() {
        let cond = x_cond.plane(c);
        let plane = out.plane_mut(c);
        for i in (0..hw).filter(|&i| mask.cells()[i]) {
            plane[i] = if w == 1.0 {
                cond[i]
            } else {
                (1.0 - w) * plane[i] + w * cond[i]
            };
        }
    }
    Ok(out)
}

/// `x_mix + gamma * eps` over the whole frame; `gamma = 0` draws nothing.
pub fn gamma_residual(
    x_mix: &LatentFrame,
    params: &ResidualParams,
    rng: &mut RandomSource,
) -> Result<LatentFrame> {
    if params.gamma == 0.0 {
        return Ok(x_mix.clone());
    }
    let eps = rng.gaussian_frame(x_mix.shape());
    x_mix.axpby(1.0, &eps, params.gamma)
}

/// Signed normalized frequency of FFT bin `k` on an axis of length `n`, in `[-0.5, 0.5]`.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let signed = if 2 * k <= n { k as f64 } else { k as f64 - n as f64 };
    signed / n as f64
}

/// Ideal low-pass indicator over the `h x w` FFT grid: a bin passes when both
/// of its normalized frequencies satisfy `|f| <= cutoff`. `cutoff = 0` passes
/// nothing; `cutoff = 0.5` passes everything.
pub fn lowpass_indicator(h: usize, w: usize, cutoff: f64) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (fy, fx) = (bin_frequency(i / w, h), bin_frequency(i % w, w));
            cutoff > 0.0 && fy.abs() <= cutoff && fx.abs() <= cutoff
        })
        .collect()
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&cutoff) {
        return Err(Error::param(format!("cutoff must be in [0, 0.5], got {cutoff}")));
    }
    Ok(())
}

struct Fft2 {
    h: usize,
    w: usize,
    planner: FftPlanner<f64>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            planner: FftPlanner::new(),
        }
    }

    fn transform(&mut self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let row = if inverse {
            self.planner.plan_fft_inverse(w)
        } else {
            self.planner.plan_fft_forward(w)
        };
        let col = if inverse {
            self.planner.plan_fft_inverse(h)
        } else {
            self.planner.plan_fft_forward(h)
        };
        for r in buf.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        if inverse {
            let k = 1.0 / (h * w) as f64;
            buf.iter_mut().for_each(|v| *v *= k);
        }
    }

    fn forward(&mut self, plane: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    fn inverse_real(&mut self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spec, true);
        spec.into_iter().map(|c| c.re).collect()
    }
}

/// Per-channel spectral merge: low frequencies from `low`, the rest from `high`.
pub fn spectral_merge(low: &LatentFrame, high: &LatentFrame, cutoff: f64) -> Result<LatentFrame> {
    check_cutoff(cutoff)?;
    low.ensure_same_shape(high)?;
    let (c, h, w) = low.shape();
    let pass = lowpass_indicator(h, w, cutoff);
    let mut fft = Fft2::new(h, w);
    let mut out = LatentFrame::zeros((c, h, w));
    for ch in 0..c {
        let a = fft.forward(low.plane(ch));
        let b = fft.forward(high.plane(ch));
        let merged = a
            .into_iter()
            .zip(b)
            .zip(&pass)
            .map(|((x, y), &p)| if p { x } else { y })
            .collect();
        out.plane_mut(ch).copy_from_slice(&fft.inverse_real(merged));
    }
    Ok(out)
}

/// Low-frequency part of `x` under [`lowpass_indicator`].
pub fn lowpass(x: &LatentFrame, cutoff: f64) -> Result<LatentFrame> {
    spectral_merge(x, &LatentFrame::zeros(x.shape()), cutoff)
}

/// High-frequency complement of [`lowpass`].
pub fn highpass(x: &LatentFrame, cutoff: f64) -> Result<LatentFrame> {
    spectral_merge(&LatentFrame::zeros(x.shape()), x, cutoff)
}

/// Fresh tail latent at `t = T` whose low spatial frequencies come from the
/// most recently denoised frame diffused to `T`, and whose high frequencies
/// are fresh unit Gaussian noise.
///
/// Draws from `rng` in order: the diffusion noise for `x_recent`, then the
/// fresh noise frame.
pub fn reinit_tail_noise(
    x_recent: &LatentFrame,
    schedule: &NoiseSchedule,
    cutoff: f64,
    rng: &mut RandomSource,
) -> Result<LatentFrame> {
    check_cutoff(cutoff)?;
    let diffused = forward_diffuse(x_recent, schedule.timesteps(), schedule, rng)?;
    let fresh = rng.gaussian_frame(x_recent.shape());
    spectral_merge(&diffused, &fresh, cutoff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{make_schedule, ScheduleKind};
    use proptest::prelude::*;

    fn frame(seed: u64) -> LatentFrame {
        RandomSource::new(seed).gaussian_frame((3, 4, 4))
    }

    #[test]
    fn blend_limits() {
        let (x, c) = (frame(1), frame(2));
        let p = BlendParams::new(2.0).unwrap();
        assert_eq!(blend_region(&x, &c, &Mask::empty(4, 4), &p).unwrap(), x);
        assert_eq!(blend_region(&x, &c, &Mask::full(4, 4), &p).unwrap(), c);
    }

    #[test]
    fn blend_half_weight_inside_square() {
        let x = LatentFrame::zeros((2, 4, 4));
        let c = LatentFrame::filled((2, 4, 4), 2.0);
        let m = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let out = blend_region(&x, &c, &m, &BlendParams::new(1.0).unwrap()).unwrap();
        for ch in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let want = if y < 2 && xx < 2 { 1.0 } else { 0.0 };
                    assert_eq!(out.get(ch, y, xx), want);
                }
            }
        }
    }

    #[test]
    fn strength_maps_to_weight() {
        assert_eq!(BlendParams::new(2.0).unwrap().weight(), 1.0);
        assert_eq!(BlendParams::new(3.0).unwrap().weight(), 1.0);
        assert_eq!(BlendParams::new(1.5).unwrap().weight(), 0.75);
        assert_eq!(BlendParams::new(0.0).unwrap().weight(), 0.0);
        assert!(BlendParams::new(-1.0).is_err());
    }

    #[test]
    fn blend_shape_errors() {
        let x = frame(1);
        let c = LatentFrame::zeros((3, 4, 5));
        let p = BlendParams::new(2.0).unwrap();
        assert!(blend_region(&x, &c, &Mask::empty(4, 4), &p).is_err());
        assert!(blend_region(&x, &x, &Mask::empty(4, 5), &p).is_err());
    }

    #[test]
    fn residual_identity_and_std() {
        let x = frame(3);
        let mut rng = RandomSource::new(0);
        let p0 = ResidualParams::new(0.0).unwrap();
        assert_eq!(gamma_residual(&x, &p0, &mut rng).unwrap(), x);

        let z = LatentFrame::zeros((4, 64, 64));
        let out = gamma_residual(&z, &ResidualParams::new(0.1).unwrap(), &mut rng).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 0.1 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn residual_reproducible() {
        let x = frame(3);
        let p = ResidualParams::new(0.2).unwrap();
        let a = gamma_residual(&x, &p, &mut RandomSource::new(5)).unwrap();
        let b = gamma_residual(&x, &p, &mut RandomSource::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lowpass_indicator_extremes() {
        assert!(lowpass_indicator(8, 6, 0.0).iter().all(|&p| !p));
        assert!(lowpass_indicator(8, 6, 0.5).iter().all(|&p| p));
        let quarter = lowpass_indicator(16, 16, 0.25);
        // |k| <= 4 on each axis: 9 bins per axis.
        assert_eq!(quarter.iter().filter(|&&p| p).count(), 81);
    }

    #[test]
    fn tail_cutoff_extremes() {
        let s = make_schedule(50, 0.001, 0.02, ScheduleKind::Linear).unwrap();
        let x = frame(7);
        let mut r = RandomSource::new(9);
        let mut probe = r.clone();
        let out0 = reinit_tail_noise(&x, &s, 0.0, &mut r).unwrap();
        let _diffused = forward_diffuse(&x, 50, &s, &mut probe).unwrap();
        let fresh = probe.gaussian_frame(x.shape());
        assert!(out0.max_abs_diff(&fresh).unwrap() < 1e-12);

        let mut r = RandomSource::new(9);
        let mut probe = r.clone();
        let out_full = reinit_tail_noise(&x, &s, 0.5, &mut r).unwrap();
        let diffused = forward_diffuse(&x, 50, &s, &mut probe).unwrap();
        assert!(out_full.max_abs_diff(&diffused).unwrap() < 1e-12);

        assert!(reinit_tail_noise(&x, &s, 0.6, &mut r).is_err());
        assert!(reinit_tail_noise(&x, &s, -0.1, &mut r).is_err());
    }

    #[test]
    fn tail_with_zero_cutoff_is_unit_gaussian() {
        let s = make_schedule(50, 0.001, 0.02, ScheduleKind::Linear).unwrap();
        let x = LatentFrame::filled((4, 64, 64), 3.0);
        let out = reinit_tail_noise(&x, &s, 0.0, &mut RandomSource::new(1)).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn lowpass_plus_highpass_is_identity(seed in any::<u64>(), cutoff in 0.0f64..=0.5) {
            let x = RandomSource::new(seed).gaussian_frame((2, 6, 8));
            let sum = lowpass(&x, cutoff).unwrap().axpby(1.0, &highpass(&x, cutoff).unwrap(), 1.0).unwrap();
            prop_assert!(sum.max_abs_diff(&x).unwrap() < 1e-12);
        }

        #[test]
        fn blend_is_linear_in_weight(seed in any::<u64>(), w in 0.0f64..=1.0) {
            let mut r = RandomSource::new(seed);
            let x = r.gaussian_frame((2, 4, 4));
            let c = r.gaussian_frame((2, 4, 4));
            let m = Mask::from_fn(4, 4, |y, x| (y * 4 + x) % 3 == 0);
            let out = blend_with_weight(&x, &c, &m, w).unwrap();
            let full = blend_with_weight(&x, &c, &m, 1.0).unwrap();
            let expect = x.axpby(1.0 - w, &full, w).unwrap();
            prop_assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
            let twice = blend_with_weight(&full, &c, &m, 1.0).unwrap();
            prop_assert_eq!(twice, full);
        }
    }
}
