//! Python bindings for the mixing pipeline and its numerical building blocks.
//!
//! Latents cross the boundary as `Latent` objects built from a `(C, H, W)`
//! shape and a flat channel-major list of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use moca_core::blending::{blend_region, gamma_residual as core_gamma_residual, reinit_tail_noise, BlendParams, ResidualParams};
use moca_core::config::parse_config;
use moca_core::metrics;
use moca_core::pipeline::{run_semantic_mix, MixInputs};
use moca_core::scheduler;
use moca_core::synth::{self, GaussianPriorDenoiser, OracleDenoiser};
use moca_core::tensorcore::{self as tc, lts, LatentFrame, LatentSequence, RandomSource};
use moca_core::tracking::{self, ThresholdSegmenter};
use moca_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::SingularSchedule { .. } | Error::DivisionByZero { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for moca_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(module = "moca", frozen, from_py_object)]
#[derive(Clone)]
struct NoiseSchedule(tc::NoiseSchedule);

#[pymethods]
impl NoiseSchedule {
    #[new]
    #[pyo3(signature = (timesteps=1000, beta_start=0.00085, beta_end=0.012, kind="scaled_linear"))]
    fn new(timesteps: usize, beta_start: f64, beta_end: f64, kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "linear" => tc::ScheduleKind::Linear,
            "scaled_linear" => tc::ScheduleKind::ScaledLinear,
            other => return Err(PyValueError::new_err(format!("unknown schedule kind {other:?}"))),
        };
        Ok(Self(tc::make_schedule(timesteps, beta_start, beta_end, kind).py()?))
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.0.timesteps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.0.timesteps() {
            return Err(PyValueError::new_err(format!("t={t} beyond T={}", self.0.timesteps())));
        }
        Ok(self.0.alpha_bar(t))
    }
}

#[pyclass(module = "moca", frozen, from_py_object)]
#[derive(Clone)]
struct Latent(LatentFrame);

#[pymethods]
impl Latent {
    #[new]
    fn new(shape: (usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        Ok(Self(LatentFrame::from_vec(shape, data).py()?))
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize)) -> Self {
        Self(LatentFrame::zeros(shape))
    }

    #[staticmethod]
    fn gaussian(shape: (usize, usize, usize), seed: u64) -> Self {
        Self(RandomSource::new(seed).gaussian_frame(shape))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, c: usize, y: usize, x: usize) -> PyResult<f64> {
        let (ch, h, w) = self.0.shape();
        if c >= ch || y >= h || x >= w {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.get(c, y, x))
    }

    fn max_abs_diff(&self, other: &Latent) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).py()
    }

    fn __eq__(&self, other: &Latent) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Latent(shape={:?})", self.0.shape())
    }
}

#[pyclass(module = "moca", frozen, from_py_object)]
#[derive(Clone)]
struct Mask(tracking::Mask);

#[pymethods]
impl Mask {
    #[new]
    fn new(height: usize, width: usize, cells: Vec<bool>) -> PyResult<Self> {
        Ok(Self(tracking::Mask::from_cells(height, width, cells).py()?))
    }

    #[staticmethod]
    fn full(height: usize, width: usize) -> Self {
        Self(tracking::Mask::full(height, width))
    }

    #[staticmethod]
    fn empty(height: usize, width: usize) -> Self {
        Self(tracking::Mask::empty(height, width))
    }

    #[getter]
    fn area(&self) -> usize {
        self.0.area()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    fn tolist(&self) -> Vec<bool> {
        self.0.cells().to_vec()
    }

    fn __eq__(&self, other: &Mask) -> bool {
        self.0 == other.0
    }
}

#[derive(Clone)]
enum Inner {
    Oracle(OracleDenoiser),
    Prior(GaussianPriorDenoiser),
}

/// Analytic denoiser: the oracle for a known clean latent, or the exact
/// posterior-mean denoiser for an elementwise Gaussian prior.
#[pyclass(module = "moca", frozen, from_py_object)]
#[derive(Clone)]
struct Denoiser(Inner);

impl Denoiser {
    fn get(&self) -> &dyn scheduler::Denoiser {
        match &self.0 {
            Inner::Oracle(d) => d,
            Inner::Prior(d) => d,
        }
    }
}

#[pymethods]
impl Denoiser {
    #[staticmethod]
    fn oracle(x0: &Latent, schedule: &NoiseSchedule) -> PyResult<Self> {
        Ok(Self(Inner::Oracle(OracleDenoiser::new(x0.0.clone(), &schedule.0).py()?)))
    }

    #[staticmethod]
    fn gaussian_prior(mean: f64, var: f64, schedule: &NoiseSchedule) -> PyResult<Self> {
        Ok(Self(Inner::Prior(GaussianPriorDenoiser::new(mean, var, &schedule.0).py()?)))
    }

    fn predict_eps(&self, x: &Latent, t: usize) -> PyResult<Latent> {
        Ok(Latent(self.get().predict_eps(&x.0, t).py()?))
    }
}

fn frames(seq: LatentSequence) -> Vec<Latent> {
    seq.into_frames().into_iter().map(Latent).collect()
}

fn sequence(items: Vec<Latent>) -> PyResult<LatentSequence> {
    LatentSequence::new(items.into_iter().map(|l| l.0).collect()).py()
}

#[pyfunction]
fn kappa_at(t: usize, total: usize, kappa0: f64) -> f64 {
    scheduler::kappa_at(t, total, kappa0)
}

#[pyfunction]
fn forward_diffuse(x0: &Latent, t: usize, schedule: &NoiseSchedule, seed: u64) -> PyResult<Latent> {
    Ok(Latent(tc::forward_diffuse(&x0.0, t, &schedule.0, &mut RandomSource::new(seed)).py()?))
}

#[pyfunction]
#[pyo3(signature = (x_t, t, t_prev, denoiser, schedule, eta=0.0, seed=0))]
fn ddim_step(
    x_t: &Latent,
    t: usize,
    t_prev: usize,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    eta: f64,
    seed: u64,
) -> PyResult<Latent> {
    let mut rng = RandomSource::new(seed);
    let out = scheduler::ddim_step(&x_t.0, t, t_prev, denoiser.get(), &schedule.0, eta, &mut rng).py()?;
    Ok(Latent(out.x_prev))
}

#[pyfunction]
fn ddim_invert(x0: &Latent, denoiser: &Denoiser, schedule: &NoiseSchedule, steps: usize) -> PyResult<Vec<Latent>> {
    Ok(frames(scheduler::ddim_invert(&x0.0, denoiser.get(), &schedule.0, steps).py()?))
}

#[pyfunction]
#[pyo3(signature = (x_t, denoiser, schedule, steps, eta=0.0, seed=0))]
fn ddim_sample(
    x_t: &Latent,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seed: u64,
) -> PyResult<Latent> {
    let mut rng = RandomSource::new(seed);
    Ok(Latent(scheduler::ddim_sample(&x_t.0, denoiser.get(), &schedule.0, steps, eta, &mut rng).py()?))
}

#[pyfunction]
fn iou(a: &Mask, b: &Mask) -> PyResult<f64> {
    tracking::iou(&a.0, &b.0).py()
}

/// Threshold-segment each latent and link masks across frames.
/// Returns `(masks, linked)`.
#[pyfunction]
#[pyo3(signature = (latents, tau=0.5, theta=0.5, largest_component=true))]
fn track_masks(latents: Vec<Latent>, tau: f64, theta: f64, largest_component: bool) -> PyResult<(Vec<Mask>, Vec<bool>)> {
    let seg = ThresholdSegmenter { theta, largest_component };
    let track = tracking::track_masks(&sequence(latents)?, &seg, tau).py()?;
    Ok((track.masks.into_iter().map(Mask).collect(), track.linked))
}

#[pyfunction]
fn blend(x: &Latent, cond: &Latent, mask: &Mask, strength: f64) -> PyResult<Latent> {
    let p = BlendParams::new(strength).py()?;
    Ok(Latent(blend_region(&x.0, &cond.0, &mask.0, &p).py()?))
}

#[pyfunction]
fn gamma_residual(x: &Latent, gamma: f64, seed: u64) -> PyResult<Latent> {
    let p = ResidualParams::new(gamma).py()?;
    Ok(Latent(core_gamma_residual(&x.0, &p, &mut RandomSource::new(seed)).py()?))
}

#[pyfunction]
fn tail_noise(x_recent: &Latent, schedule: &NoiseSchedule, cutoff: f64, seed: u64) -> PyResult<Latent> {
    Ok(Latent(reinit_tail_noise(&x_recent.0, &schedule.0, cutoff, &mut RandomSource::new(seed)).py()?))
}

#[pyfunction]
fn cosine_sim(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    metrics::cosine_sim(&u, &v).py()
}

#[pyfunction]
fn cass(clip_i_orig: f64, clip_i_fused: f64, clip_t_orig: f64, clip_t_fused: f64) -> f64 {
    metrics::cass(clip_i_orig, clip_i_fused, clip_t_orig, clip_t_fused)
}

#[pyfunction]
fn rel_cass(clip_i_orig: f64, clip_i_fused: f64, clip_t_orig: f64, clip_t_fused: f64) -> PyResult<f64> {
    metrics::rel_cass(clip_i_orig, clip_i_fused, clip_t_orig, clip_t_fused).py()
}

#[pyfunction]
fn clip_bs(sim_fused_a: f64, sim_fused_b: f64, sim_a_a: f64, sim_b_b: f64) -> f64 {
    metrics::clip_bs(sim_fused_a, sim_fused_b, sim_a_a, sim_b_b)
}

#[pyfunction]
#[pyo3(signature = (a, b, height, width, window=11, sigma=1.5, range=1.0))]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize, window: usize, sigma: f64, range: f64) -> PyResult<f64> {
    let ga = metrics::ImageGrid::new(height, width, a).py()?;
    let gb = metrics::ImageGrid::new(height, width, b).py()?;
    metrics::ssim(&ga, &gb, &metrics::SsimParams { window, sigma, range }).py()
}

/// Moving-square toy scene: `(latents, ground_truth_masks)`.
#[pyfunction]
#[pyo3(signature = (frames=16, grid=8, square=4, velocity=(1, 0), channels=4))]
fn moving_square_scene(
    frames: usize,
    grid: usize,
    square: usize,
    velocity: (i64, i64),
    channels: usize,
) -> PyResult<(Vec<Latent>, Vec<Mask>)> {
    let (seq, track) = synth::moving_square_scene(frames, grid, square, velocity, channels).py()?;
    Ok((self::frames(seq), track.masks.into_iter().map(Mask).collect()))
}

#[pyfunction]
fn reference_pattern(channels: usize, grid: usize) -> Latent {
    Latent(synth::reference_pattern(channels, grid))
}

#[pyfunction]
fn patch_embedding(frame: &Latent, patches: usize) -> PyResult<Vec<f64>> {
    synth::patch_embedding_proxy(&frame.0, patches).py()
}

#[pyfunction]
fn read_lts(path: PathBuf) -> PyResult<Vec<Latent>> {
    Ok(frames(lts::read_latents(&path).py()?))
}

#[pyfunction]
fn write_lts(path: PathBuf, latents: Vec<Latent>) -> PyResult<()> {
    let bytes = lts::encode_latents(&sequence(latents)?).py()?;
    std::fs::write(&path, bytes).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
}

#[pyfunction]
fn read_masks(path: PathBuf) -> PyResult<Vec<Mask>> {
    Ok(lts::read_masks(&path).py()?.into_iter().map(Mask).collect())
}

#[pyfunction]
fn write_masks(path: PathBuf, masks: Vec<Mask>) -> PyResult<()> {
    let masks: Vec<_> = masks.into_iter().map(|m| m.0).collect();
    let bytes = lts::encode_masks(&masks).py()?;
    std::fs::write(&path, bytes).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
}

/// Validate a JSON run config and return it with defaults filled in.
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    Ok(parse_config(text).py()?.to_json())
}

/// Run the mixing pipeline. Returns `(frames, masks, manifest_json)`.
#[pyfunction]
#[pyo3(signature = (config_json, cond, source=None, masks=None))]
fn run_mix(
    config_json: &str,
    cond: &Latent,
    source: Option<Vec<Latent>>,
    masks: Option<Vec<Mask>>,
) -> PyResult<(Vec<Latent>, Vec<Mask>, String)> {
    let config = parse_config(config_json).py()?;
    let inputs = MixInputs {
        source: source.map(sequence).transpose()?,
        cond: cond.0.clone(),
        masks: masks.map(|m| m.into_iter().map(|m| m.0).collect()),
    };
    let schedule = config.schedule().py()?;
    let denoiser = config.build_denoiser(&schedule).py()?;
    let out = run_semantic_mix(&config, &inputs, denoiser.as_ref(), &config.segmenter(), false).py()?;
    let manifest = serde_json::to_string(&out.manifest).expect("manifest serializes");
    Ok((frames(out.frames), out.track.masks.into_iter().map(Mask).collect(), manifest))
}

#[pymodule]
fn moca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<NoiseSchedule>()?;
    m.add_class::<Latent>()?;
    m.add_class::<Mask>()?;
    m.add_class::<Denoiser>()?;
    m.add_function(wrap_pyfunction!(kappa_at, m)?)?;
    m.add_function(wrap_pyfunction!(forward_diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_step, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_invert, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_sample, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(track_masks, m)?)?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_residual, m)?)?;
    m.add_function(wrap_pyfunction!(tail_noise, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(cass, m)?)?;
    m.add_function(wrap_pyfunction!(rel_cass, m)?)?;
    m.add_function(wrap_pyfunction!(clip_bs, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(moving_square_scene, m)?)?;
    m.add_function(wrap_pyfunction!(reference_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(patch_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(read_lts, m)?)?;
    m.add_function(wrap_pyfunction!(write_lts, m)?)?;
    m.add_function(wrap_pyfunction!(read_masks, m)?)?;
    m.add_function(wrap_pyfunction!(write_masks, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_mix, m)?)?;
    Ok(())
}
