//! `moca`: command-line front end for the semantic mixing pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use moca_core::config::{parse_config, RunConfig};
use moca_core::metrics::{compare, lpips_aggregate, ssim, CompareInputs, EmbeddingKind, EmbeddingSet, ImageGrid, LpipsMode, MetricReport, Scale, SsimParams};
use moca_core::pipeline::{run_semantic_mix, MixInputs};
use moca_core::scheduler::ddim_invert;
use moca_core::synth::{moving_square_scene, patch_embedding_proxy, reference_pattern};
use moca_core::tensorcore::{lts, LatentFrame, LatentSequence};
use moca_core::tracking::{track_masks, ThresholdSegmenter};
use moca_core::{Error, Result};

#[derive(Parser)]
#[command(name = "moca", version, about = "Semantic mixing of a reference concept into video latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full mixing pipeline from a JSON config.
    Mix(MixArgs),
    /// DDIM-invert one frame of an LTS file into its noise trajectory.
    Invert(InvertArgs),
    /// Alignment metrics (CASS, relCASS and optional SSIM/LPIPS) as JSON.
    Metrics(MetricsArgs),
    /// Threshold-segment and link masks across frames.
    Track(TrackArgs),
    /// Write the moving-square toy scene and a matching run config.
    Synth(SynthArgs),
    /// Patch-mean proxy embeddings of every frame in an LTS file.
    Embed(EmbedArgs),
    /// CASS next to the absolute-difference blending score.
    Compare(CompareArgs),
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-step JSON lines to trace.jsonl.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Schedule and denoiser settings; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Unit,
    Percent,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Unit => Scale::Unit,
            ScaleArg::Percent => Scale::Percent,
        }
    }
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    orig: PathBuf,
    #[arg(long)]
    fused: PathBuf,
    /// Single-vector embedding of the reference image.
    #[arg(long)]
    cond: PathBuf,
    /// Single-vector embedding of the source prompt.
    #[arg(long)]
    text: PathBuf,
    #[arg(long, value_enum, default_value = "percent")]
    scale: ScaleArg,
    #[arg(long)]
    out: PathBuf,
    /// JSON list of per-frame LPIPS distances.
    #[arg(long)]
    lpips_i: Option<PathBuf>,
    /// JSON list of adjacent-frame LPIPS distances.
    #[arg(long)]
    lpips_t: Option<PathBuf>,
    /// Original frames (LTS) for SSIM on channel means.
    #[arg(long, requires = "ssim_fused")]
    ssim_orig: Option<PathBuf>,
    #[arg(long, requires = "ssim_orig")]
    ssim_fused: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    ssim_window: usize,
    #[arg(long, default_value_t = 1.0)]
    ssim_range: f64,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    latents: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Keep only the largest 4-connected component.
    #[arg(long)]
    largest: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 4)]
    square: usize,
    /// Per-frame displacement as `dx,dy`.
    #[arg(long, default_value = "1,0", value_parser = parse_velocity)]
    velocity: (i64, i64),
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    patches: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    latents: PathBuf,
    #[arg(long, default_value_t = 4)]
    patches: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    orig: PathBuf,
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    cond: PathBuf,
    /// Prompt embedding of concept A (the source video).
    #[arg(long)]
    text: PathBuf,
    /// Prompt embedding of concept B (the reference).
    #[arg(long)]
    text_b: PathBuf,
    /// Video embeddings for concept A; defaults to `--orig`.
    #[arg(long)]
    video_a: Option<PathBuf>,
    /// Video embeddings for concept B; defaults to `--cond`.
    #[arg(long)]
    video_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "percent")]
    scale: ScaleArg,
    #[arg(long)]
    out: PathBuf,
}

fn parse_velocity(s: &str) -> std::result::Result<(i64, i64), String> {
    let (a, b) = s.split_once(',').ok_or("expected dx,dy")?;
    let p = |v: &str| v.trim().parse::<i64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write via a sibling temp file and rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut config = parse_config(&read_text(path)?)?;
    if let Ok(seed) = std::env::var("MOCA_SEED") {
        config.seed = seed
            .trim()
            .parse()
            .map_err(|_| Error::Validation {
                field: "MOCA_SEED".into(),
                message: format!("not an unsigned integer: {seed:?}"),
            })?;
    }
    // Relative input paths are taken from the config file's directory.
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut config.io.source, &mut config.io.cond, &mut config.io.masks]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn run_mix(args: &MixArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    config.validate()?;
    let inputs = MixInputs::load(&config)?;
    let schedule = config.schedule()?;
    let denoiser = config.build_denoiser(&schedule)?;
    let out = run_semantic_mix(&config, &inputs, denoiser.as_ref(), &config.segmenter(), args.trace)?;

    ensure_dir(&args.out)?;
    let frames_path = args.out.join("frames.lts");
    let masks_path = args.out.join("masks.lts");
    write_atomic(&frames_path, &lts::encode_latents(&out.frames)?)?;
    write_atomic(&masks_path, &lts::encode_masks(&out.track.masks)?)?;
    write_json(&sidecar_path(&masks_path), &out.track.sidecar())?;
    let mut manifest = out.manifest;
    manifest.outputs = vec![frames_path, masks_path, sidecar_path(&args.out.join("masks.lts"))];
    if args.trace {
        let mut text = String::new();
        for rec in &out.trace {
            text.push_str(&serde_json::to_string(rec).expect("serializable trace"));
            text.push('\n');
        }
        let trace_path = args.out.join("trace.jsonl");
        write_atomic(&trace_path, text.as_bytes())?;
        manifest.outputs.push(trace_path);
    }
    write_json(&args.out.join("manifest.json"), &manifest)
}

fn run_invert(args: &InvertArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    config.validate()?;
    let seq = lts::read_latents(&args.latents)?;
    let x0 = seq.get(args.frame).ok_or_else(|| {
        Error::Param(format!("frame {} out of range for {} frames", args.frame, seq.len()))
    })?;
    let schedule = config.schedule()?;
    let denoiser = config.build_denoiser(&schedule)?;
    let traj = ddim_invert(x0, denoiser.as_ref(), &schedule, args.steps)?;
    write_atomic(&args.out, &lts::encode_latents(&traj)?)
}

fn read_single(path: &Path) -> Result<Vec<f64>> {
    Ok(EmbeddingSet::read(path)?.single()?.to_vec())
}

fn read_list(path: &Path) -> Result<Vec<f64>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn mean_grid(frame: &LatentFrame) -> Result<ImageGrid> {
    ImageGrid::new(frame.height(), frame.width(), frame.channel_mean())
}

fn run_metrics(args: &MetricsArgs) -> Result<()> {
    let orig = EmbeddingSet::read(&args.orig)?;
    let fused = EmbeddingSet::read(&args.fused)?;
    let cond = read_single(&args.cond)?;
    let text = read_single(&args.text)?;
    let mut report = MetricReport::compute(&orig, &fused, &cond, &text, args.scale.into())?;
    if let Some(p) = &args.lpips_i {
        report.lpips_i = Some(lpips_aggregate(&read_list(p)?, LpipsMode::Image)?);
    }
    if let Some(p) = &args.lpips_t {
        report.lpips_t = Some(lpips_aggregate(&read_list(p)?, LpipsMode::Temporal)?);
    }
    if let (Some(a), Some(b)) = (&args.ssim_orig, &args.ssim_fused) {
        let (a, b) = (lts::read_latents(a)?, lts::read_latents(b)?);
        if a.len() != b.len() {
            return Err(Error::Param(format!("SSIM inputs have {} and {} frames", a.len(), b.len())));
        }
        let params = SsimParams {
            window: args.ssim_window,
            range: args.ssim_range,
            ..SsimParams::default()
        };
        let mut total = 0.0;
        for (fa, fb) in a.iter().zip(b.iter()) {
            total += ssim(&mean_grid(fa)?, &mean_grid(fb)?, &params)?;
        }
        report.ssim_mean = Some(total / a.len() as f64);
    }
    write_json(&args.out, &report)
}

fn run_track(args: &TrackArgs) -> Result<()> {
    let latents = lts::read_latents(&args.latents)?;
    let seg = ThresholdSegmenter {
        theta: args.theta,
        largest_component: args.largest,
    };
    let track = track_masks(&latents, &seg, args.tau)?;
    write_atomic(&args.out, &lts::encode_masks(&track.masks)?)?;
    write_json(&sidecar_path(&args.out), &track.sidecar())
}

fn embed(seq: &LatentSequence, patches: usize) -> Result<EmbeddingSet> {
    let frames = seq
        .iter()
        .map(|f| patch_embedding_proxy(f, patches))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(EmbeddingKind::Visual, frames)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let (scene, gt) = moving_square_scene(args.frames, args.grid, args.square, args.velocity, args.channels)?;
    let cond = LatentSequence::new(vec![reference_pattern(args.channels, args.grid)])?;
    let orig = embed(&scene, args.patches)?;
    let image = embed(&cond, args.patches)?;
    // Prompt proxy: the mean of the original frame embeddings.
    let mut text = vec![0.0; orig.dim];
    for f in &orig.frames {
        text.iter_mut().zip(f).for_each(|(t, v)| *t += v / orig.frames.len() as f64);
    }
    let text = EmbeddingSet::new(EmbeddingKind::Text, vec![text])?;

    ensure_dir(&args.out)?;
    write_atomic(&args.out.join("scene.lts"), &lts::encode_latents(&scene)?)?;
    write_atomic(&args.out.join("gt_masks.lts"), &lts::encode_masks(&gt.masks)?)?;
    write_atomic(&args.out.join("cond.lts"), &lts::encode_latents(&cond)?)?;
    write_json(&args.out.join("orig_embeddings.json"), &orig)?;
    write_json(&args.out.join("cond_embedding.json"), &image)?;
    write_json(&args.out.join("text_embedding.json"), &text)?;

    let mut config = RunConfig::default();
    config.schedule.timesteps = 64;
    config.queue.length = args.frames.min(16);
    config.queue.frames = args.frames;
    config.injection.t_prime = 19;
    config.io.source = Some("scene.lts".into());
    config.io.cond = Some("cond.lts".into());
    config.validate()?;
    write_atomic(&args.out.join("run.json"), format!("{}\n", config.to_json()).as_bytes())
}

fn run_embed(args: &EmbedArgs) -> Result<()> {
    let seq = lts::read_latents(&args.latents)?;
    write_json(&args.out, &embed(&seq, args.patches)?)
}

fn run_compare(args: &CompareArgs) -> Result<()> {
    let orig = EmbeddingSet::read(&args.orig)?;
    let fused = EmbeddingSet::read(&args.fused)?;
    let cond_set = EmbeddingSet::read(&args.cond)?;
    let cond = cond_set.single()?;
    let text_a = read_single(&args.text)?;
    let text_b = read_single(&args.text_b)?;
    let video_a = args.video_a.as_deref().map(EmbeddingSet::read).transpose()?;
    let video_b = args.video_b.as_deref().map(EmbeddingSet::read).transpose()?;
    let inputs = CompareInputs {
        orig: &orig,
        fused: &fused,
        cond_image: cond,
        text_a: &text_a,
        text_b: &text_b,
        video_a: video_a.as_ref().unwrap_or(&orig),
        video_b: video_b.as_ref().unwrap_or(&cond_set),
    };
    write_json(&args.out, &compare(&inputs, args.scale.into())?)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite(_) | Error::SingularSchedule { .. } | Error::DivisionByZero { .. } => 4,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Param(_) => "param",
        Error::Shape { .. } => "shape",
        Error::SingularSchedule { .. } => "singular_schedule",
        Error::Domain(_) => "domain",
        Error::DivisionByZero { .. } => "division_by_zero",
        Error::DegenerateTrack { .. } => "degenerate_track",
        Error::Validation { .. } => "validation",
        Error::NonFinite(_) => "non_finite",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first.to_string(), 2);
        }
    };
    let result = match &cli.command {
        Command::Mix(a) => run_mix(a),
        Command::Invert(a) => run_invert(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Track(a) => run_track(a),
        Command::Synth(a) => run_synth(a),
        Command::Embed(a) => run_embed(a),
        Command::Compare(a) => run_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(kind(&e), e.to_string(), exit_code(&e)),
    }
}
