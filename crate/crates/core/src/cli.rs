//! Command-line front end: `run`, `sweep` and `verify`.
//!
//! Exit codes: 0 success, 1 failed invariant, 2 I/O or input format problem,
//! 3 pipeline failure (the message names the step and layer).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use image::{DynamicImage, ImageEncoder};
use log::{debug, info, warn};
use serde::Serialize;

use crate::exec::Exec;
use crate::guidance::GuidanceSchedule;
use crate::latent::{LatentGrid, Shape};
use crate::masking::{self, ObjectMask};
use crate::pipeline::{PipelineError, Removal, RemovalConfig, RunReport};
use crate::scheduler::{invert, make_schedule, InversionTrace};
use crate::toydenoiser::{build_denoiser, DenoiserError, ToyDenoiser};
use crate::verify::{self, Fault, VerifyOptions};

pub const LOG_ENV: &str = "PANDORA_LOG";

#[derive(Debug, Parser)]
#[command(name = "pandora", version, about = "Zero-shot object removal on a toy diffusion denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove the masked object and write result.png and report.json.
    Run(RunArgs),
    /// One run per percentile on a shared inversion, plus summary.json.
    Sweep(SweepArgs),
    /// Run the built-in invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// 8-bit PNG or PGM, 1 or 3 channels, square power-of-two side of at least 8.
    #[arg(long)]
    pub image: PathBuf,
    /// 8-bit grayscale mask of the same size; values above 127 mark the object.
    #[arg(long)]
    pub mask: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Inversion trace cache: read if it matches the input, otherwise written.
    #[arg(long)]
    pub cache_trace: Option<PathBuf>,
    /// Worker threads for data-parallel kernels and sweep runs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Knobs {
    /// DDIM steps T.
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_STEPS)]
    pub steps: usize,
    /// Guidance weight α (the start value when --alpha-end is given).
    #[arg(long, default_value_t = crate::guidance::DEFAULT_ALPHA, allow_negative_numbers = true)]
    pub alpha: f64,
    /// α at the last step; switches to a linear schedule.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha_end: Option<f64>,
    /// Leading denoising iterations with removal attention on.
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_ACTIVE_STEPS)]
    pub active_steps: usize,
    /// Denoiser weight seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Knobs {
    pub fn config(&self, percentile: f64) -> RemovalConfig {
        let alpha = match self.alpha_end {
            Some(end) => GuidanceSchedule::Linear { start: self.alpha, end },
            None => GuidanceSchedule::Constant { alpha: self.alpha },
        };
        RemovalConfig {
            steps: self.steps,
            percentile,
            alpha,
            active_steps: self.active_steps,
            seed: self.seed,
            layer_filter: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub knobs: Knobs,
    /// Fraction of keys dissolved per object query.
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_PERCENTILE)]
    pub percentile: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub knobs: Knobs,
    /// Comma-separated percentiles.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.05,0.15,0.25")]
    pub percentiles: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Seed `N` or inclusive range `A..B`.
    #[arg(long, default_value = "0")]
    pub seed: SeedRange,
    /// Run a single check by number.
    #[arg(long)]
    pub check: Option<u8>,
    /// Break the top-k tie rule to confirm the suite notices.
    #[arg(long, hide = true)]
    pub fault_flip_tie_break: bool,
}

/// Inclusive seed range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("bad seed {v:?}: {e}"));
        let (start, end) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        if start > end {
            return Err(format!("empty seed range {s}"));
        }
        Ok(Self { start, end })
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn verify(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    pub fn input(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn pipeline(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Problems with the inputs map to 2; failures inside the loop map to 3.
/// The message already embeds its cause, so the chain is not kept.
fn classify(e: PipelineError) -> Failure {
    let error = anyhow!("{e}");
    match e {
        PipelineError::NoBackground
        | PipelineError::MaskSize { .. }
        | PipelineError::ImageShape { .. }
        | PipelineError::TraceSteps { .. }
        | PipelineError::Config(_)
        | PipelineError::Mask(_)
        | PipelineError::Guidance(_) => Failure::input(error),
        _ => Failure::pipeline(error),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    // a second init in the same process is harmless
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => with_jobs(args.inputs.jobs, || cmd_run(&args)),
        Command::Sweep(args) => with_jobs(args.inputs.jobs, || cmd_sweep(&args)),
        Command::Verify(args) => cmd_verify(&args),
    }
}

#[cfg(feature = "parallel")]
fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T, Failure> + Send) -> Result<T, Failure>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Failure::input(anyhow!("cannot start {n} worker threads: {e}")))?;
            pool.install(f)
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
    if jobs.is_some_and(|n| n > 1) {
        warn!("built without the parallel feature; --jobs is ignored");
    }
    f()
}

/// Pixels mapped linearly from `[0, 255]` to `[−1, 1]`, one latent channel
/// per image channel.
pub fn image_to_latent(img: &DynamicImage) -> anyhow::Result<LatentGrid> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.as_raw()),
        other => return Err(anyhow!("unsupported pixel format {:?}; need 8-bit gray or RGB", other.color())),
    };
    Ok(LatentGrid::from_fn(Shape::new(channels, h, w), |c, y, x| {
        f64::from(raw[(y * w + x) * channels + c]) / 127.5 - 1.0
    }))
}

/// Inverse of [`image_to_latent`] with clamping, encoded as PNG.
pub fn latent_to_png(grid: &LatentGrid) -> anyhow::Result<Vec<u8>> {
    let s = grid.shape();
    let color = match s.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(anyhow!("cannot write {c}-channel image")),
    };
    let mut raw = Vec::with_capacity(s.len());
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                let v = (grid.get(c, y, x).clamp(-1.0, 1.0) + 1.0) * 127.5;
                raw.push(v.round() as u8);
            }
        }
    }
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(&raw, s.width as u32, s.height as u32, color)
        .context("encoding png")?;
    Ok(png)
}

fn read_image(path: &Path) -> Result<LatentGrid, Failure> {
    let img = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .with_context(|| format!("reading {}", path.display()))
        .and_then(|r| r.decode().with_context(|| format!("decoding {}", path.display())))
        .map_err(Failure::input)?;
    image_to_latent(&img).with_context(|| format!("image {}", path.display())).map_err(Failure::input)
}

fn read_mask(path: &Path) -> Result<ObjectMask, Failure> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::input)?;
    masking::load_mask(&bytes).with_context(|| format!("mask {}", path.display())).map_err(Failure::input)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.as_file().sync_all().ok();
    tmp.persist(path).map_err(|e| e.error).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(Failure::input)
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut v = serde_json::to_vec_pretty(value).context("serializing json").map_err(Failure::input)?;
    v.push(b'\n');
    Ok(v)
}

struct Loaded {
    image: LatentGrid,
    mask: ObjectMask,
    denoiser: ToyDenoiser,
}

fn load(inputs: &Inputs, seed: u64) -> Result<Loaded, Failure> {
    let image = read_image(&inputs.image)?;
    let mask = read_mask(&inputs.mask)?;
    let s = image.shape();
    if (mask.height(), mask.width()) != (s.height, s.width) {
        return Err(Failure::input(anyhow!(
            "mask {} is {}x{} but image {} is {}x{}",
            inputs.mask.display(),
            mask.width(),
            mask.height(),
            inputs.image.display(),
            s.width,
            s.height
        )));
    }
    if !mask.has_background() {
        return Err(Failure::input(anyhow!("{}: mask has no background pixels", inputs.mask.display())));
    }
    let denoiser = build_denoiser(seed, s).map_err(|e| match e {
        DenoiserError::UnsupportedShape(_) => {
            Failure::input(anyhow!("image {}: {e}", inputs.image.display()))
        }
        other => Failure::pipeline(other.into()),
    })?;
    Ok(Loaded { image, mask, denoiser })
}

/// Reads the cached trace when it was made from this image with this step
/// count; otherwise inverts and refreshes the cache.
fn trace_for(loaded: &Loaded, steps: usize, cache: Option<&Path>) -> Result<InversionTrace, Failure> {
    if let Some(path) = cache.filter(|p| p.exists()) {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display())).map_err(Failure::input)?;
        let trace = InversionTrace::read_from(std::io::BufReader::new(file))
            .with_context(|| format!("trace cache {}", path.display()))
            .map_err(Failure::input)?;
        if trace.steps() == steps && trace.shape() == loaded.image.shape() && trace.x0() == &loaded.image {
            info!("using cached trace {}", path.display());
            return Ok(trace);
        }
        warn!("trace cache {} belongs to another input or step count; recomputing", path.display());
    }
    let started = Instant::now();
    let schedule = make_schedule(steps).map_err(|e| Failure::input(e.into()))?;
    let trace = invert(&loaded.image, &loaded.denoiser, &schedule).map_err(|e| Failure::pipeline(e.into()))?;
    debug!("inversion took {:?}", started.elapsed());
    if let Some(path) = cache {
        let mut bytes = Vec::new();
        trace.write_to(&mut bytes).map_err(|e| Failure::input(e.into()))?;
        write_output(path, &bytes)?;
        info!("wrote trace cache {}", path.display());
    }
    Ok(trace)
}

fn session<'d>(loaded: &'d Loaded, cfg: &RemovalConfig, cache: Option<&Path>) -> Result<Removal<'d, ToyDenoiser>, Failure> {
    cfg.validate().map_err(classify)?;
    let trace = trace_for(loaded, cfg.steps, cache)?;
    Removal::from_trace(&loaded.image, &loaded.mask, &loaded.denoiser, trace).map_err(classify)
}

fn write_run(dir: &Path, output: &LatentGrid, report: &RunReport) -> Result<(), Failure> {
    let png = latent_to_png(output).map_err(Failure::input)?;
    write_output(&dir.join("result.png"), &png)?;
    write_output(&dir.join("report.json"), &json(report)?)
}

pub fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.knobs.config(args.percentile);
    let loaded = load(&args.inputs, cfg.seed)?;
    let session = session(&loaded, &cfg, args.inputs.cache_trace.as_deref())?;
    let (output, report) = session.run(&cfg).map_err(classify)?;
    info!(
        "removal done in {} ms, {} dissolved entries, background mse {:.3e}",
        report.wall_ms,
        report.total_dissolved(),
        report.background_mse
    );
    write_run(&args.inputs.out, &output, &report)
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    steps: usize,
    seed: u64,
    runs: Vec<SweepRun>,
}

#[derive(Debug, Serialize)]
struct SweepRun {
    percentile: f64,
    dir: String,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dissolved: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    background_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    masked_divergence: Option<f64>,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    if args.percentiles.is_empty() {
        return Err(Failure::input(anyhow!("--percentiles is empty")));
    }
    let mut percentiles = args.percentiles.clone();
    percentiles.sort_by(f64::total_cmp);
    let base = args.knobs.config(percentiles[0]);
    for &p in &percentiles {
        RemovalConfig { percentile: p, ..base.clone() }.validate().map_err(classify)?;
    }
    let loaded = load(&args.inputs, base.seed)?;
    let session = session(&loaded, &base, args.inputs.cache_trace.as_deref())?;

    let mut runs = Vec::with_capacity(percentiles.len());
    let mut failures = Vec::new();
    for (i, entry) in session.sweep_with(&base, &percentiles, Exec::default()).into_iter().enumerate() {
        let dir_name = format!("{i:02}_p{}", entry.percentile);
        let run = match entry.outcome {
            Ok((output, report)) => {
                write_run(&args.inputs.out.join(&dir_name), &output, &report)?;
                SweepRun {
                    percentile: entry.percentile,
                    dir: dir_name,
                    ok: true,
                    error: None,
                    dissolved: Some(report.total_dissolved()),
                    background_mse: Some(report.background_mse),
                    masked_divergence: report.metrics.masked_divergence,
                }
            }
            Err(e) => {
                warn!("p = {}: {e}", entry.percentile);
                failures.push(format!("p = {}: {e}", entry.percentile));
                SweepRun {
                    percentile: entry.percentile,
                    dir: dir_name,
                    ok: false,
                    error: Some(e.to_string()),
                    dissolved: None,
                    background_mse: None,
                    masked_divergence: None,
                }
            }
        };
        runs.push(run);
    }
    let summary = SweepSummary { steps: base.steps, seed: base.seed, runs };
    write_output(&args.inputs.out.join("summary.json"), &json(&summary)?)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::pipeline(anyhow!("{} of {} runs failed: {}", failures.len(), percentiles.len(), failures.join("; "))))
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut failed = 0;
    let mut total = 0;
    for seed in args.seed.start..=args.seed.end {
        let opts = VerifyOptions {
            seed,
            fault: args.fault_flip_tie_break.then_some(Fault::FlipTieBreak),
        };
        println!("seed {seed}");
        let outcomes = match args.check {
            Some(id) => vec![verify::run_check(id, &opts)
                .ok_or_else(|| Failure::input(anyhow!("no check numbered {id}")))?],
            None => verify::run_all(&opts),
        };
        for o in outcomes {
            println!("  {}", o.line());
            total += 1;
            failed += usize::from(!o.passed);
        }
    }
    println!("{} of {total} checks passed in {:.1}s", total - failed, started.elapsed().as_secs_f64());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::verify(anyhow!("{failed} check(s) failed")))
    }
}
