//! End-to-end object removal.
//!
//! A [`Removal`] session inverts the input once and keeps the trace. Each
//! [`Removal::run`] then walks `t = T..1`. Every step does one forward on
//! the stored latent `x^i_t`, which captures `(K_i, V_i)` and gives `ε_u`.
//! It does a second forward on the current latent with the removal
//! processor installed, which gives `ε_c`. The two predictions are blended
//! under the mask and one DDIM step is taken. Encoding and decoding are the
//! identity: the image grid is the latent.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attnctl::{pandora_processor, AttnError, DissolutionConfig, InjectionProcessor, StepWindow};
use crate::exec::Exec;
use crate::guidance::{alpha_at, ladg_blend, GuidanceError, GuidanceSchedule, NoisePair};
use crate::latent::{LatentGrid, Shape};
use crate::masking::{MaskError, ObjectMask, TokenMasks};
use crate::metrics::{MetricsError, RegionMetrics};
use crate::scheduler::{ddim_step, invert, make_schedule, DiffusionSchedule, InversionTrace, ScheduleError};
use crate::toydenoiser::{Denoiser, DenoiserError, LayerId, ProcessorMap};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_PERCENTILE: f64 = 0.05;
pub const DEFAULT_ACTIVE_STEPS: usize = 45;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("mask has no background pixels")]
    NoBackground,
    #[error("mask is {mask:?} but image is {image:?}")]
    MaskSize { mask: (usize, usize), image: (usize, usize) },
    #[error("image shape {image:?} does not match denoiser shape {denoiser:?}")]
    ImageShape { image: Shape, denoiser: Shape },
    #[error("trace has {trace} steps, config asks for {config}")]
    TraceSteps { trace: usize, config: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("step {t}, layer {layer}: {source}")]
    Attention { t: usize, layer: LayerId, source: AttnError },
    #[error("step {t}: {source}")]
    Denoiser { t: usize, source: DenoiserError },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// `(t, layer)` where the run stopped, when known.
    pub fn location(&self) -> Option<(usize, Option<LayerId>)> {
        match self {
            PipelineError::Attention { t, layer, .. } => Some((*t, Some(*layer))),
            PipelineError::Denoiser { t, source } => match source {
                DenoiserError::Processor { layer, .. } | DenoiserError::ProcessorShape { layer, .. } => {
                    Some((*t, Some(*layer)))
                }
                _ => Some((*t, None)),
            },
            _ => None,
        }
    }
}

fn step_error(t: usize, e: DenoiserError) -> PipelineError {
    match e {
        DenoiserError::Processor { layer, source } => PipelineError::Attention { t, layer, source },
        other => PipelineError::Denoiser { t, source: other },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalConfig {
    pub steps: usize,
    pub percentile: f64,
    pub alpha: GuidanceSchedule,
    /// Number of leading denoising iterations with removal attention on.
    pub active_steps: usize,
    pub seed: u64,
    /// `None` installs the processor on every attention layer.
    pub layer_filter: Option<BTreeSet<LayerId>>,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            percentile: DEFAULT_PERCENTILE,
            alpha: GuidanceSchedule::default(),
            active_steps: DEFAULT_ACTIVE_STEPS,
            seed: 0,
            layer_filter: None,
        }
    }
}

impl RemovalConfig {
    pub fn window(&self) -> StepWindow {
        StepWindow::first_iterations(self.active_steps, self.steps)
    }

    pub fn dissolution(&self) -> Result<DissolutionConfig, PipelineError> {
        let cfg = DissolutionConfig::new(self.percentile, self.window())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(match &self.layer_filter {
            Some(layers) => cfg.with_layers(layers.iter().copied()),
            None => cfg,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.steps == 0 {
            return Err(PipelineError::Config("steps must be at least 1".into()));
        }
        if self.active_steps > self.steps {
            return Err(PipelineError::Config(format!(
                "active steps {} exceed total steps {}",
                self.active_steps, self.steps
            )));
        }
        self.alpha.validate()?;
        self.dissolution().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub alpha: f64,
    /// Dissolved `(row, key)` entries per layer; zero outside the window.
    pub dissolved: BTreeMap<LayerId, usize>,
    pub k: BTreeMap<LayerId, usize>,
    /// RMS of `x_{t−1}`.
    pub latent_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RemovalConfig,
    pub steps: Vec<StepRecord>,
    /// Against the empty-mask reconstruction run, which separates the edit's
    /// effect from round-trip error. `metrics` also has the raw-input figure.
    pub background_mse: f64,
    pub metrics: RegionMetrics,
    /// Forwards of this run's loop, two per step. The shared reconstruction
    /// run is not counted.
    pub denoiser_forwards: usize,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn total_dissolved(&self) -> usize {
        self.steps.iter().flat_map(|s| s.dissolved.values()).sum()
    }
}

/// One input image and mask with its inversion trace.
pub struct Removal<'d, D: Denoiser + ?Sized> {
    denoiser: &'d D,
    image: LatentGrid,
    mask: ObjectMask,
    latent_mask: ObjectMask,
    schedule: DiffusionSchedule,
    trace: InversionTrace,
    token_masks: TokenMasks,
    empty_masks: TokenMasks,
    /// Reconstruction runs by active step count.
    references: Mutex<BTreeMap<usize, LatentGrid>>,
}

struct LoopResult {
    x: LatentGrid,
    records: Vec<StepRecord>,
    forwards: usize,
}

impl<'d, D: Denoiser + ?Sized> Removal<'d, D> {
    /// Validates inputs and inverts the image with `steps` DDIM steps.
    pub fn prepare(image: &LatentGrid, mask: &ObjectMask, denoiser: &'d D, steps: usize) -> Result<Self, PipelineError> {
        Self::check_inputs(image, mask, denoiser)?;
        let schedule = make_schedule(steps)?;
        let trace = invert(image, denoiser, &schedule)?;
        Self::assemble(image, mask, denoiser, schedule, trace)
    }

    /// Uses a previously computed trace of `image`.
    pub fn from_trace(
        image: &LatentGrid,
        mask: &ObjectMask,
        denoiser: &'d D,
        trace: InversionTrace,
    ) -> Result<Self, PipelineError> {
        Self::check_inputs(image, mask, denoiser)?;
        if trace.shape() != image.shape() {
            return Err(PipelineError::ImageShape { image: trace.shape(), denoiser: image.shape() });
        }
        let schedule = make_schedule(trace.steps())?;
        Self::assemble(image, mask, denoiser, schedule, trace)
    }

    fn check_inputs(image: &LatentGrid, mask: &ObjectMask, denoiser: &D) -> Result<(), PipelineError> {
        let s = image.shape();
        if denoiser.shape() != s {
            return Err(PipelineError::ImageShape { image: s, denoiser: denoiser.shape() });
        }
        if (mask.height(), mask.width()) != (s.height, s.width) {
            return Err(PipelineError::MaskSize {
                mask: (mask.height(), mask.width()),
                image: (s.height, s.width),
            });
        }
        if !mask.has_background() {
            return Err(PipelineError::NoBackground);
        }
        Ok(())
    }

    fn assemble(
        image: &LatentGrid,
        mask: &ObjectMask,
        denoiser: &'d D,
        schedule: DiffusionSchedule,
        trace: InversionTrace,
    ) -> Result<Self, PipelineError> {
        let s = image.shape();
        let resolutions: Vec<usize> = denoiser.attention_layers().iter().map(|l| l.resolution).collect();
        let token_masks = TokenMasks::build(mask, resolutions.iter().copied())?;
        let empty_masks = TokenMasks::build(&ObjectMask::empty(mask.width(), mask.height()), resolutions)?;
        Ok(Self {
            denoiser,
            image: image.clone(),
            mask: mask.clone(),
            latent_mask: mask.pool(s.height, s.width)?,
            schedule,
            trace,
            token_masks,
            empty_masks,
            references: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn trace(&self) -> &InversionTrace {
        &self.trace
    }

    pub fn image(&self) -> &LatentGrid {
        &self.image
    }

    pub fn mask(&self) -> &ObjectMask {
        &self.mask
    }

    /// The object mask at latent resolution.
    pub fn latent_mask(&self) -> &ObjectMask {
        &self.latent_mask
    }

    pub fn token_masks(&self) -> &TokenMasks {
        &self.token_masks
    }

    fn check_config(&self, cfg: &RemovalConfig) -> Result<DissolutionConfig, PipelineError> {
        cfg.validate()?;
        if cfg.steps != self.trace.steps() {
            return Err(PipelineError::TraceSteps { trace: self.trace.steps(), config: cfg.steps });
        }
        cfg.dissolution()
    }

    /// Removal with this session's mask.
    pub fn run(&self, cfg: &RemovalConfig) -> Result<(LatentGrid, RunReport), PipelineError> {
        let started = Instant::now();
        let out = self.edit_loop(cfg, &self.token_masks, &self.latent_mask)?;
        let reference = self.reference(cfg)?;
        let metrics = RegionMetrics::compute(&out.x, &reference, &self.image, &self.latent_mask)?;
        let report = RunReport {
            config: cfg.clone(),
            steps: out.records,
            background_mse: metrics.background_mse,
            metrics,
            denoiser_forwards: out.forwards,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        Ok((out.x, report))
    }

    /// The same loop with an empty mask: every edit path collapses and the
    /// run reconstructs the input.
    pub fn reconstruction(&self, cfg: &RemovalConfig) -> Result<LatentGrid, PipelineError> {
        let s = self.image.shape();
        Ok(self.edit_loop(cfg, &self.empty_masks, &ObjectMask::empty(s.width, s.height))?.x)
    }

    /// The reconstruction for `cfg`'s active window, computed once per session.
    pub fn reference(&self, cfg: &RemovalConfig) -> Result<LatentGrid, PipelineError> {
        let key = cfg.active_steps;
        if let Some(r) = self.references.lock().expect("reference cache").get(&key) {
            return Ok(r.clone());
        }
        let r = self.injection_only(cfg)?;
        self.references.lock().expect("reference cache").entry(key).or_insert_with(|| r.clone());
        Ok(r)
    }

    fn edit_loop(&self, cfg: &RemovalConfig, masks: &TokenMasks, latent_mask: &ObjectMask) -> Result<LoopResult, PipelineError> {
        let dissolution = self.check_config(cfg)?;
        let layers = self.denoiser.attention_layers();
        let steps = self.schedule.steps();
        let no_hooks = ProcessorMap::new();
        let mut records = Vec::with_capacity(steps);
        let mut forwards = 0;

        let mut x = self.trace.x_final().clone();
        for t in (1..=steps).rev() {
            let inv = self
                .denoiser
                .forward(self.trace.get(t), t, &no_hooks, true)
                .map_err(|e| step_error(t, e))?;
            let processor = pandora_processor(&dissolution, masks, &inv.captured, t);
            let hooks = ProcessorMap::on_layers(layers, &processor);
            let cur = self.denoiser.forward(&x, t, &hooks, false).map_err(|e| step_error(t, e))?;
            forwards += 2;

            let alpha = alpha_at(&cfg.alpha, t, steps);
            let eps = ladg_blend(&NoisePair::new(cur.eps, inv.eps)?, latent_mask, alpha)?;
            x = ddim_step(&x, &eps, t, &self.schedule)?;

            let stats = processor.stats();
            records.push(StepRecord {
                t,
                alpha,
                dissolved: layers.iter().map(|l| (l.id, stats.get(&l.id).map_or(0, |s| s.dissolved))).collect(),
                k: layers.iter().map(|l| (l.id, stats.get(&l.id).map_or(0, |s| s.k))).collect(),
                latent_rms: x.rms(),
            });
        }
        Ok(LoopResult { x, records, forwards })
    }

    /// Sampling from `x_T` with plain key/value injection from the trace
    /// inside the active window and no mask, dissolution or guidance.
    pub fn injection_only(&self, cfg: &RemovalConfig) -> Result<LatentGrid, PipelineError> {
        self.check_config(cfg)?;
        let layers = self.denoiser.attention_layers();
        let window = cfg.window();
        let no_hooks = ProcessorMap::new();
        let mut x = self.trace.x_final().clone();
        for t in (1..=self.schedule.steps()).rev() {
            let inv = self
                .denoiser
                .forward(self.trace.get(t), t, &no_hooks, true)
                .map_err(|e| step_error(t, e))?;
            let processor = InjectionProcessor::new(window, &inv.captured, t);
            let hooks = ProcessorMap::on_layers(layers, &processor);
            let eps = self.denoiser.forward(&x, t, &hooks, false).map_err(|e| step_error(t, e))?.eps;
            x = ddim_step(&x, &eps, t, &self.schedule)?;
        }
        Ok(x)
    }

    pub fn sweep(&self, base: &RemovalConfig, percentiles: &[f64]) -> Vec<SweepEntry> {
        self.sweep_with(base, percentiles, Exec::default())
    }

    /// One run per percentile on the shared trace. Failed runs are kept as
    /// errors and do not stop the sweep.
    pub fn sweep_with(&self, base: &RemovalConfig, percentiles: &[f64], exec: Exec) -> Vec<SweepEntry> {
        // warm the shared reference so parallel runs do not each compute it;
        // a failure here resurfaces in every run
        if !percentiles.is_empty() {
            let _ = self.reference(base);
        }
        exec.map(percentiles.len(), |i| {
            let cfg = RemovalConfig { percentile: percentiles[i], ..base.clone() };
            SweepEntry { percentile: percentiles[i], outcome: self.run(&cfg) }
        })
    }
}

#[derive(Debug)]
pub struct SweepEntry {
    pub percentile: f64,
    pub outcome: Result<(LatentGrid, RunReport), PipelineError>,
}

/// Inverts `image` and runs one removal.
pub fn remove_objects<D: Denoiser + ?Sized>(
    image: &LatentGrid,
    mask: &ObjectMask,
    denoiser: &D,
    cfg: &RemovalConfig,
) -> Result<(LatentGrid, RunReport), PipelineError> {
    cfg.validate()?;
    Removal::prepare(image, mask, denoiser, cfg.steps)?.run(cfg)
}

/// Inverts `image` once and runs one removal per percentile.
pub fn percentile_sweep<D: Denoiser + ?Sized>(
    image: &LatentGrid,
    mask: &ObjectMask,
    denoiser: &D,
    base: &RemovalConfig,
    percentiles: &[f64],
) -> Result<Vec<SweepEntry>, PipelineError> {
    base.validate()?;
    Ok(Removal::prepare(image, mask, denoiser, base.steps)?.sweep(base, percentiles))
}

/// Two flat regions with a bright square object, the standard desk-scale scene.
pub mod scene {
    use super::*;

    /// `channels × side × side` image: left half dark, right half light,
    /// plus a textured square of `object` pixels at `(top, left)`.
    pub fn two_region_square(channels: usize, side: usize, top: usize, left: usize, object: usize) -> (LatentGrid, ObjectMask) {
        let inside = |y: usize, x: usize| (top..top + object).contains(&y) && (left..left + object).contains(&x);
        let image = LatentGrid::from_fn(Shape::new(channels, side, side), |c, y, x| {
            if inside(y, x) {
                0.9 - 0.3 * (((y + x + c) % 3) as f64)
            } else if x < side / 2 {
                -0.6 + 0.05 * c as f64
            } else {
                0.4 - 0.05 * c as f64
            }
        });
        (image, ObjectMask::from_fn(side, side, inside))
    }

    /// The 32×32 scene with an 8×8 object aligned to every token grid.
    pub fn standard(channels: usize) -> (LatentGrid, ObjectMask) {
        two_region_square(channels, 32, 12, 12, 8)
    }
}
