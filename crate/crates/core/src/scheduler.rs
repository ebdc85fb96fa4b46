//! Deterministic DDIM (η = 0): schedule, inversion and reverse steps.
//!
//! Steps are indexed `t = 0..=T` with `ᾱ_0 = 1`. The betas are linear in
//! `[1e-4, 2e-2]` over the `T` steps and `ᾱ_t = ∏_{s≤t} (1 − β_s)`.

use std::io::{Read, Write};

use thiserror::Error;

use crate::latent::{LatentError, LatentGrid, Shape};
use crate::toydenoiser::{Denoiser, DenoiserError};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("denoiser failed at step {t}: {source}")]
    Denoiser { t: usize, source: DenoiserError },
    #[error("bad trace file: {0}")]
    TraceFormat(String),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize) -> Result<DiffusionSchedule, ScheduleError> {
    if steps == 0 {
        return Err(ScheduleError::ZeroSteps);
    }
    let beta = |s: usize| {
        if steps == 1 {
            BETA_START
        } else {
            BETA_START + (BETA_END - BETA_START) * (s - 1) as f64 / (steps - 1) as f64
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for s in 1..=steps {
        alpha_bar.push(alpha_bar[s - 1] * (1.0 - beta(s)));
    }
    Ok(DiffusionSchedule { alpha_bar })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }
}

/// `x_{t−1} = √ᾱ_{t−1}·(x_t − √(1−ᾱ_t)·ε)/√ᾱ_t + √(1−ᾱ_{t−1})·ε`.
pub fn ddim_step(
    x_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<LatentGrid, ScheduleError> {
    sched.check(t)?;
    Ok(transfer(x_t, eps, sched.alpha_bar(t), sched.alpha_bar(t - 1))?)
}

/// The inverse direction: `x_t` from `x_{t−1}` and an ε estimate.
pub fn ddim_invert_step(
    x_prev: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<LatentGrid, ScheduleError> {
    sched.check(t)?;
    Ok(transfer(x_prev, eps, sched.alpha_bar(t - 1), sched.alpha_bar(t))?)
}

/// Moves a latent from noise level `from` to `to` along the predicted ε.
fn transfer(x: &LatentGrid, eps: &LatentGrid, from: f64, to: f64) -> Result<LatentGrid, LatentError> {
    x.ensure_shape(eps)?;
    let (sa_from, sb_from) = (from.sqrt(), (1.0 - from).sqrt());
    let (sa_to, sb_to) = (to.sqrt(), (1.0 - to).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa_to * ((x - sb_from * e) / sa_from) + sb_to * e)
        .collect();
    LatentGrid::new(x.shape(), data)
}

/// Latents `x_0..=x_T` from one inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrace {
    latents: Vec<LatentGrid>,
}

impl InversionTrace {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn shape(&self) -> Shape {
        self.latents[0].shape()
    }

    pub fn get(&self, t: usize) -> &LatentGrid {
        &self.latents[t]
    }

    pub fn x0(&self) -> &LatentGrid {
        &self.latents[0]
    }

    pub fn x_final(&self) -> &LatentGrid {
        self.latents.last().expect("trace is never empty")
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Runs DDIM inversion from `x0`, evaluating ε at the previous latent.
pub fn invert<D: Denoiser + ?Sized>(
    x0: &LatentGrid,
    denoiser: &D,
    sched: &DiffusionSchedule,
) -> Result<InversionTrace, ScheduleError> {
    let mut latents = Vec::with_capacity(sched.steps() + 1);
    latents.push(x0.clone());
    for t in 1..=sched.steps() {
        let prev = &latents[t - 1];
        let eps = denoiser
            .predict(prev, t - 1)
            .map_err(|source| ScheduleError::Denoiser { t, source })?;
        let next = ddim_invert_step(prev, &eps, t, sched)?;
        latents.push(next);
    }
    Ok(InversionTrace { latents })
}

/// Unhooked reverse run from `x_T` down to `x_0`.
pub fn sample<D: Denoiser + ?Sized>(
    x_final: &LatentGrid,
    denoiser: &D,
    sched: &DiffusionSchedule,
) -> Result<LatentGrid, ScheduleError> {
    let mut x = x_final.clone();
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser
            .predict(&x, t)
            .map_err(|source| ScheduleError::Denoiser { t, source })?;
        x = ddim_step(&x, &eps, t, sched)?;
    }
    Ok(x)
}

const TRACE_MAGIC: &[u8; 4] = b"PNDR";
const TRACE_VERSION: u32 = 1;

impl InversionTrace {
    /// Wraps precomputed latents, e.g. from a cache.
    pub fn from_latents(latents: Vec<LatentGrid>) -> Result<Self, ScheduleError> {
        let first = latents
            .first()
            .ok_or_else(|| ScheduleError::TraceFormat("no latents".into()))?
            .shape();
        if latents.len() < 2 {
            return Err(ScheduleError::TraceFormat("need at least x_0 and x_1".into()));
        }
        if let Some(bad) = latents.iter().find(|l| l.shape() != first) {
            return Err(LatentError::ShapeMismatch(first, bad.shape()).into());
        }
        Ok(Self { latents })
    }

    /// Little-endian: magic, version, T, channels, height, width (u32),
    /// then `T+1` grids of f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ScheduleError> {
        let s = self.shape();
        w.write_all(TRACE_MAGIC)?;
        for v in [TRACE_VERSION, self.steps() as u32, s.channels as u32, s.height as u32, s.width as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for grid in &self.latents {
            for x in grid.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ScheduleError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(ScheduleError::TraceFormat("bad magic".into()));
        }
        let mut word = || -> Result<u32, ScheduleError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != TRACE_VERSION {
            return Err(ScheduleError::TraceFormat(format!("unsupported version {version}")));
        }
        let steps = word()? as usize;
        let shape = Shape::new(word()? as usize, word()? as usize, word()? as usize);
        if steps == 0 || shape.is_empty() {
            return Err(ScheduleError::TraceFormat("empty header".into()));
        }
        let mut latents = Vec::with_capacity(steps + 1);
        let mut buf = vec![0u8; shape.len() * 8];
        for _ in 0..=steps {
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            latents.push(LatentGrid::new(shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ScheduleError::TraceFormat("trailing bytes".into()));
        }
        Self::from_latents(latents)
    }
}
