//! DDIM stepping, DDIM inversion and momentum-corrected denoising.
//!
//! Notation follows the DDIM convention: `alpha_bar_t` is the cumulative
//! product of `1 - beta_s`. A step moves from timestep `t` to `t_prev` on a
//! (possibly strided) timestep grid; with a unit stride `t_prev = t - 1`.

use crate::error::{Error, Result};
use crate::tensorcore::{LatentFrame, LatentSequence, NoiseSchedule, RandomSource, Shape};

/// A noise predictor `eps_theta(x_t, t)`.
///
/// Implementations must return a frame of the input's shape and be
/// deterministic for fixed `(x_t, t)`.
pub trait Denoiser {
    fn predict_eps(&self, x_t: &LatentFrame, t: usize) -> Result<LatentFrame>;
}

impl<F> Denoiser for F
where
    F: Fn(&LatentFrame, usize) -> Result<LatentFrame>,
{
    fn predict_eps(&self, x_t: &LatentFrame, t: usize) -> Result<LatentFrame> {
        self(x_t, t)
    }
}

fn call_denoiser(d: &dyn Denoiser, x_t: &LatentFrame, t: usize) -> Result<LatentFrame> {
    let eps = d.predict_eps(x_t, t)?;
    x_t.ensure_same_shape(&eps)?;
    if !eps.is_finite() {
        return Err(Error::NonFinite(format!("denoiser output at t={t}")));
    }
    Ok(eps)
}

/// Uniform timestep grid `0 = t_0 < t_1 < ... < t_steps = T`, with
/// `t_k = round(k * T / steps)`.
pub fn uniform_grid(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::param("step count must be >= 1"));
    }
    if steps > total {
        return Err(Error::param(format!(
            "step count {steps} exceeds the {total} schedule timesteps"
        )));
    }
    Ok((0..=steps)
        .map(|k| (2 * k * total + steps) / (2 * steps))
        .collect())
}

/// `(x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)`.
pub fn predict_x0(
    x_t: &LatentFrame,
    t: usize,
    eps_hat: &LatentFrame,
    schedule: &NoiseSchedule,
) -> Result<LatentFrame> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::SingularSchedule { t });
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = x_t.zip_map(eps_hat, |x, e| (x - sb * e) / sa)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("predicted x0 at t={t}")));
    }
    Ok(out)
}

/// Result of one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `x_{t-1}`.
    pub x_prev: LatentFrame,
    /// The clean-latent estimate the step emitted from (corrected, for momentum steps).
    pub x0_hat: LatentFrame,
    /// `sqrt(1 - alpha_bar_{t-1} - sigma_t^2) * eps_hat`.
    pub dir: LatentFrame,
    pub kappa_used: f64,
}

/// `sigma_t` of the generalized DDIM step `t -> t_prev`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    if eta == 0.0 || ab_t >= 1.0 {
        return 0.0;
    }
    eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).max(0.0).sqrt()
}

fn check_step(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<()> {
    if t == 0 || t > schedule.timesteps() {
        return Err(Error::param(format!(
            "step timestep {t} outside [1, {}]",
            schedule.timesteps()
        )));
    }
    if t_prev >= t {
        return Err(Error::param(format!("previous timestep {t_prev} must be below {t}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::param(format!("eta must be finite and >= 0, got {eta}")));
    }
    Ok(())
}

// Everything a step needs before the emission: x0_hat, dir, the noise term.
struct Provisional {
    x0_hat: LatentFrame,
    dir: LatentFrame,
    sqrt_ab_prev: f64,
    noise: Option<LatentFrame>,
}

impl Provisional {
    fn new(
        x_t: &LatentFrame,
        t: usize,
        t_prev: usize,
        denoiser: &dyn Denoiser,
        schedule: &NoiseSchedule,
        eta: f64,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        check_step(schedule, t, t_prev, eta)?;
        let eps = call_denoiser(denoiser, x_t, t)?;
        let x0_hat = predict_x0(x_t, t, &eps, schedule)?;
        let ab_prev = schedule.alpha_bar(t_prev);
        let sigma = ddim_sigma(schedule, t, t_prev, eta);
        let radicand = 1.0 - ab_prev - sigma * sigma;
        if radicand < -1e-12 {
            return Err(Error::param(format!(
                "sigma_t^2 = {} exceeds 1 - alpha_bar_prev = {} (eta = {eta} too large)",
                sigma * sigma,
                1.0 - ab_prev
            )));
        }
        let dir = eps.scale(radicand.max(0.0).sqrt());
        let noise = (sigma > 0.0).then(|| rng.gaussian_frame(x_t.shape()).scale(sigma));
        Ok(Self {
            x0_hat,
            dir,
            sqrt_ab_prev: ab_prev.sqrt(),
            noise,
        })
    }

    fn emit(&self, x0: &LatentFrame) -> Result<LatentFrame> {
        let mut out = x0.axpby(self.sqrt_ab_prev, &self.dir, 1.0)?;
        if let Some(n) = &self.noise {
            out = out.axpby(1.0, n, 1.0)?;
        }
        Ok(out)
    }
}

/// One DDIM reverse step `t -> t_prev`.
///
/// `x_prev = sqrt(alpha_bar_prev) * x0_hat + dir + sigma_t * eps_t`; with
/// `eta = 0` no noise is drawn and the step is deterministic.
pub fn ddim_step(
    x_t: &LatentFrame,
    t: usize,
    t_prev: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut RandomSource,
) -> Result<StepOutput> {
    let p = Provisional::new(x_t, t, t_prev, denoiser, schedule, eta, rng)?;
    let x_prev = p.emit(&p.x0_hat)?;
    Ok(StepOutput {
        x_prev,
        x0_hat: p.x0_hat,
        dir: p.dir,
        kappa_used: 0.0,
    })
}

/// `kappa0 * (1 - t / T)`: zero at `t = T`, `kappa0` at `t = 0`.
pub fn kappa_at(t: usize, total: usize, kappa0: f64) -> f64 {
    kappa0 * (1.0 - t as f64 / total as f64)
}

/// Velocity accumulator for momentum-corrected denoising of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    v: LatentFrame,
    beta: f64,
    lambda: f64,
    kappa0: f64,
    total: usize,
    prev_x: Option<LatentFrame>,
}

impl MomentumState {
    pub fn new(shape: Shape, beta: f64, lambda: f64, kappa0: f64, total: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::param(format!("momentum decay beta must be in [0, 1], got {beta}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::param(format!("direction scale lambda must be >= 0, got {lambda}")));
        }
        if !(kappa0 >= 0.0 && kappa0.is_finite()) {
            return Err(Error::param(format!("base weight kappa0 must be >= 0, got {kappa0}")));
        }
        if total == 0 {
            return Err(Error::param("total timesteps must be >= 1"));
        }
        Ok(Self {
            v: LatentFrame::zeros(shape),
            beta,
            lambda,
            kappa0,
            total,
            prev_x: None,
        })
    }

    pub fn velocity(&self) -> &LatentFrame {
        &self.v
    }

    /// The latent the most recent step started from.
    pub fn prev_x(&self) -> Option<&LatentFrame> {
        self.prev_x.as_ref()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn total_timesteps(&self) -> usize {
        self.total
    }
}

/// One momentum-corrected DDIM step `t -> t_prev`.
///
/// The vanilla DDIM result is computed first and used as `x_{t-1}` in
/// `g_t = x_t - x_{t-1} + lambda * dir_t`; then `v <- beta v + (1 - beta) g_t`,
/// `x0_corr = x0_hat + kappa_t v` and `x_{t-1}` is re-emitted from `x0_corr`
/// with the same `dir_t` and the same noise draw.
#[allow(clippy::too_many_arguments)]
pub fn momentum_step(
    x_t: &LatentFrame,
    t: usize,
    t_prev: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    state: &mut MomentumState,
    eta: f64,
    rng: &mut RandomSource,
) -> Result<StepOutput> {
    if state.total != schedule.timesteps() {
        return Err(Error::param(format!(
            "momentum state built for T={}, schedule has T={}",
            state.total,
            schedule.timesteps()
        )));
    }
    x_t.ensure_same_shape(&state.v)?;
    let p = Provisional::new(x_t, t, t_prev, denoiser, schedule, eta, rng)?;
    let x_ddim = p.emit(&p.x0_hat)?;

    let (beta, lambda) = (state.beta, state.lambda);
    let g = x_t.zip_map(&x_ddim, |a, b| a - b)?.axpby(1.0, &p.dir, lambda)?;
    state.v = state.v.axpby(beta, &g, 1.0 - beta)?;
    state.prev_x = Some(x_t.clone());

    let kappa = kappa_at(t, state.total, state.kappa0);
    if kappa == 0.0 {
        return Ok(StepOutput {
            x_prev: x_ddim,
            x0_hat: p.x0_hat,
            dir: p.dir,
            kappa_used: kappa,
        });
    }
    let x0_corr = p.x0_hat.axpby(1.0, &state.v, kappa)?;
    let x_prev = p.emit(&x0_corr)?;
    if !x_prev.is_finite() {
        return Err(Error::NonFinite(format!("momentum step output at t={t}")));
    }
    Ok(StepOutput {
        x_prev,
        x0_hat: x0_corr,
        dir: p.dir,
        kappa_used: kappa,
    })
}

/// Deterministic DDIM inversion of `x0` over a uniform grid of `steps` steps.
///
/// Each step computes `x_next = sqrt(alpha_bar_next) * x0_hat(x_t) +
/// sqrt(1 - alpha_bar_next) * eps(x_t)`. The noise estimate is taken at the
/// current latent and timestep; at `t = 0` (where noise is undefined) it is
/// taken at the first nonzero grid timestep. Returns the trajectory from `x0`
/// to `x_T` (length `steps + 1`).
pub fn ddim_invert(
    x0: &LatentFrame,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<LatentSequence> {
    let grid = uniform_grid(schedule.timesteps(), steps)?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.clone());
    let mut x = x0.clone();
    for pair in grid.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = call_denoiser(denoiser, &x, t.max(grid[1]))?;
        let x0_hat = if t == 0 {
            x.clone()
        } else {
            predict_x0(&x, t, &eps, schedule)?
        };
        let ab_n = schedule.alpha_bar(t_next);
        x = x0_hat.axpby(ab_n.sqrt(), &eps, (1.0 - ab_n).sqrt())?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("inversion at t={t_next}")));
        }
        traj.push(x.clone());
    }
    LatentSequence::new(traj)
}

/// Full reverse sweep from `x_T` to `x_0` over a uniform grid of `steps` steps.
pub fn ddim_sample(
    x_t: &LatentFrame,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut RandomSource,
) -> Result<LatentFrame> {
    let grid = uniform_grid(schedule.timesteps(), steps)?;
    let mut x = x_t.clone();
    for pair in grid.windows(2).rev() {
        x = ddim_step(&x, pair[1], pair[0], denoiser, schedule, eta, rng)?.x_prev;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{make_schedule, ScheduleKind};

    fn sched(t: usize) -> NoiseSchedule {
        make_schedule(t, 0.00085, 0.012, ScheduleKind::ScaledLinear).unwrap()
    }

    fn zero_denoiser(x: &LatentFrame, _t: usize) -> Result<LatentFrame> {
        Ok(LatentFrame::zeros(x.shape()))
    }

    #[test]
    fn grid_is_uniform_and_strict() {
        assert_eq!(uniform_grid(16, 16).unwrap(), (0..=16).collect::<Vec<_>>());
        assert_eq!(uniform_grid(1000, 50).unwrap()[1], 20);
        assert_eq!(uniform_grid(10, 3).unwrap(), vec![0, 3, 7, 10]);
        assert!(uniform_grid(10, 0).is_err());
        assert!(uniform_grid(10, 11).is_err());
    }

    #[test]
    fn predict_x0_zero_eps() {
        let s = sched(100);
        let x = LatentFrame::filled((1, 2, 2), 0.8);
        let out = predict_x0(&x, 50, &LatentFrame::zeros(x.shape()), &s).unwrap();
        for v in out.data() {
            assert!((v - 0.8 / s.alpha_bar(50).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_x0_inverts_forward_process() {
        let s = sched(1000);
        let mut rng = RandomSource::new(11);
        let x0 = rng.gaussian_frame((4, 8, 8));
        let eps = rng.gaussian_frame((4, 8, 8));
        for t in [1, 10, 300, 999, 1000] {
            let ab = s.alpha_bar(t);
            let xt = x0.axpby(ab.sqrt(), &eps, (1.0 - ab).sqrt()).unwrap();
            let back = predict_x0(&xt, t, &eps, &s).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn predict_x0_small_t_is_nearly_identity() {
        let s = sched(1000);
        let x = LatentFrame::filled((1, 2, 2), 0.3);
        let e = LatentFrame::filled((1, 2, 2), 0.1);
        let out = predict_x0(&x, 1, &e, &s).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 5e-3);
    }

    #[test]
    fn ddim_step_zero_denoiser_rescales() {
        let s = sched(50);
        let x = LatentFrame::filled((2, 3, 3), 1.25);
        let out = ddim_step(&x, 20, 19, &zero_denoiser, &s, 0.0, &mut RandomSource::new(0)).unwrap();
        let k = s.alpha_bar(19).sqrt() / s.alpha_bar(20).sqrt();
        for v in out.x_prev.data() {
            assert!((v - 1.25 * k).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_rejects_excess_eta() {
        let s = sched(50);
        let x = LatentFrame::zeros((1, 2, 2));
        let mut rng = RandomSource::new(0);
        assert!(ddim_step(&x, 20, 19, &zero_denoiser, &s, 1.0, &mut rng).is_ok());
        assert!(matches!(
            ddim_step(&x, 20, 19, &zero_denoiser, &s, 50.0, &mut rng),
            Err(Error::Param(_))
        ));
        assert!(ddim_step(&x, 0, 0, &zero_denoiser, &s, 0.0, &mut rng).is_err());
        assert!(ddim_step(&x, 51, 50, &zero_denoiser, &s, 0.0, &mut rng).is_err());
    }

    #[test]
    fn stochastic_step_is_reproducible() {
        let s = sched(50);
        let x = LatentFrame::filled((1, 4, 4), 0.5);
        let a = ddim_step(&x, 30, 29, &zero_denoiser, &s, 1.0, &mut RandomSource::new(4)).unwrap();
        let b = ddim_step(&x, 30, 29, &zero_denoiser, &s, 1.0, &mut RandomSource::new(4)).unwrap();
        assert_eq!(a, b);
        let c = ddim_step(&x, 30, 29, &zero_denoiser, &s, 1.0, &mut RandomSource::new(5)).unwrap();
        assert_ne!(a.x_prev, c.x_prev);
    }

    #[test]
    fn kappa_endpoints_and_midpoint() {
        assert_eq!(kappa_at(1000, 1000, 2.0), 0.0);
        assert_eq!(kappa_at(0, 1000, 2.0), 2.0);
        assert_eq!(kappa_at(500, 1000, 1.0), 0.5);
        for t in 1..=64 {
            assert!(kappa_at(t, 64, 1.5) <= kappa_at(t - 1, 64, 1.5));
        }
    }

    #[test]
    fn momentum_state_validates() {
        assert!(MomentumState::new((1, 2, 2), 1.5, 1.0, 2.0, 10).is_err());
        assert!(MomentumState::new((1, 2, 2), 0.9, 1.0, -1.0, 10).is_err());
        assert!(MomentumState::new((1, 2, 2), 0.9, -1.0, 1.0, 10).is_err());
        let st = MomentumState::new((1, 2, 2), 0.9, 1.0, 2.0, 10).unwrap();
        assert!(st.velocity().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn momentum_state_mismatch_errors() {
        let s = sched(50);
        let x = LatentFrame::zeros((1, 2, 2));
        let mut rng = RandomSource::new(0);
        let mut wrong_t = MomentumState::new((1, 2, 2), 0.9, 1.0, 2.0, 40).unwrap();
        assert!(momentum_step(&x, 10, 9, &zero_denoiser, &s, &mut wrong_t, 0.0, &mut rng).is_err());
        let mut wrong_shape = MomentumState::new((1, 3, 2), 0.9, 1.0, 2.0, 50).unwrap();
        assert!(momentum_step(&x, 10, 9, &zero_denoiser, &s, &mut wrong_shape, 0.0, &mut rng).is_err());
    }

    #[test]
    fn momentum_first_step_equals_vanilla() {
        // kappa_T = 0, so the step starting at t = T is uncorrected no matter what v holds.
        let s = sched(20);
        let mut rng = RandomSource::new(2);
        let x = rng.gaussian_frame((2, 4, 4));
        let den = |x: &LatentFrame, _t: usize| Ok(x.scale(0.3));
        let mut st = MomentumState::new(x.shape(), 0.5, 1.0, 2.0, 20).unwrap();
        st.v = LatentFrame::filled(x.shape(), 9.0);
        let a = momentum_step(&x, 20, 19, &den, &s, &mut st, 0.0, &mut RandomSource::new(1)).unwrap();
        let b = ddim_step(&x, 20, 19, &den, &s, 0.0, &mut RandomSource::new(1)).unwrap();
        assert_eq!(a.x_prev, b.x_prev);
        assert_eq!(a.kappa_used, 0.0);
    }

    #[test]
    fn momentum_reuses_the_noise_draw() {
        let s = sched(20);
        let x = LatentFrame::filled((1, 4, 4), 0.2);
        let den = |x: &LatentFrame, _t: usize| Ok(x.scale(0.5));
        let mut st = MomentumState::new(x.shape(), 0.9, 1.0, 2.0, 20).unwrap();
        let mut r1 = RandomSource::new(8);
        let mut r2 = RandomSource::new(8);
        momentum_step(&x, 10, 9, &den, &s, &mut st, 1.0, &mut r1).unwrap();
        ddim_step(&x, 10, 9, &den, &s, 1.0, &mut r2).unwrap();
        // Both consumed exactly one frame of noise.
        assert_eq!(r1.normal().to_bits(), r2.normal().to_bits());
    }

    #[test]
    fn momentum_matches_hand_computation() {
        let s = sched(10);
        let x = LatentFrame::filled((1, 1, 1), 1.0);
        let den = |x: &LatentFrame, _t: usize| Ok(x.scale(0.5));
        let (beta, lambda, k0) = (0.9, 0.7, 2.0);
        let mut st = MomentumState::new(x.shape(), beta, lambda, k0, 10).unwrap();
        let out = momentum_step(&x, 4, 3, &den, &s, &mut st, 0.0, &mut RandomSource::new(0)).unwrap();

        let (at, ap) = (s.alpha_bar(4), s.alpha_bar(3));
        let eps = 0.5;
        let x0 = (1.0 - (1.0 - at).sqrt() * eps) / at.sqrt();
        let dir = (1.0 - ap).sqrt() * eps;
        let x_ddim = ap.sqrt() * x0 + dir;
        let g = 1.0 - x_ddim + lambda * dir;
        let v = (1.0 - beta) * g;
        let kappa = k0 * (1.0 - 4.0 / 10.0);
        let expected = ap.sqrt() * (x0 + kappa * v) + dir;
        assert!((out.x_prev.data()[0] - expected).abs() < 1e-12);
        assert!((st.velocity().data()[0] - v).abs() < 1e-12);
        assert!((out.kappa_used - kappa).abs() < 1e-15);
    }

    #[test]
    fn inversion_with_zero_denoiser_is_rescaling() {
        let s = sched(100);
        let x0 = LatentFrame::filled((1, 2, 2), 2.0);
        let traj = ddim_invert(&x0, &zero_denoiser, &s, 10).unwrap();
        assert_eq!(traj.len(), 11);
        assert_eq!(traj.first(), &x0);
        for v in traj.last().data() {
            assert!((v - 2.0 * s.alpha_bar(100).sqrt()).abs() < 1e-12);
        }
        assert!(ddim_invert(&x0, &zero_denoiser, &s, 0).is_err());
    }
}
