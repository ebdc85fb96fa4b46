//! A small deterministic noise predictor with real self-attention layers.
//!
//! The network runs two token resolutions (`side/2` and `side/4` tokens per
//! side). Each resolution has one block:
//!
//! ```text
//! tokens -> [content | position] -> self-attention -> residual -> feed-forward -> residual
//! ```
//!
//! Token features split into content channels, which carry the latent, the
//! timestep embedding and every residual update, and fixed Fourier position
//! channels. The query/key projections pass the position channels through
//! unchanged, so attention logits have a locality term on top of the learned
//! content term, as in the self-attention of an image U-Net.
//!
//! Every attention layer is a hook point. A registered [`AttentionProcessor`]
//! receives the layer's `(Q, K, V)` and returns the attention output that
//! the rest of the layer consumes. All layers are single-head. A multi-head
//! backend applies the same processor contract to each head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attnctl::AttnError;
use crate::latent::{LatentError, LatentGrid, Shape};
use crate::ndkernel::{self, KernelError, Matrix};

pub type LayerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    /// Tokens per side.
    pub resolution: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl LayerInfo {
    pub fn tokens(&self) -> usize {
        self.resolution * self.resolution
    }
}

/// `(Q, K, V)` of one attention layer at one step, rows = tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPacket {
    pub layer: LayerInfo,
    pub step: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl AttentionPacket {
    pub fn key_dim(&self) -> usize {
        self.layer.key_dim
    }

    /// `softmax(QKᵀ/√d)·V` on the packet's own projections.
    pub fn vanilla(&self) -> Result<Matrix, KernelError> {
        ndkernel::attention(&self.q, &self.k, &self.v)
    }
}

/// Replaces the attention computation of a layer.
///
/// Implementations get the current branch's packet and return the output
/// matrix (`tokens × key_dim`). Any other run state (masks, injected
/// packets, step gating) lives in the implementor.
pub trait AttentionProcessor: Send + Sync {
    fn process(&self, packet: &AttentionPacket) -> Result<Matrix, AttnError>;
}

/// Processors keyed by the layer they are registered on.
#[derive(Default, Clone)]
pub struct ProcessorMap<'a> {
    by_layer: BTreeMap<LayerId, &'a dyn AttentionProcessor>,
}

impl<'a> ProcessorMap<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `processor` on every listed layer.
    pub fn on_layers(layers: &[LayerInfo], processor: &'a dyn AttentionProcessor) -> Self {
        let mut map = Self::new();
        for l in layers {
            map.register(l.id, processor);
        }
        map
    }

    pub fn register(&mut self, layer: LayerId, processor: &'a dyn AttentionProcessor) {
        self.by_layer.insert(layer, processor);
    }

    pub fn get(&self, layer: LayerId) -> Option<&'a dyn AttentionProcessor> {
        self.by_layer.get(&layer).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.by_layer.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("unsupported shape {0:?}: need square side, power of two, at least 8")]
    UnsupportedShape(Shape),
    #[error("network gains must be finite and positive: {0:?}")]
    InvalidConfig(ToyConfig),
    #[error("input shape {got:?} does not match denoiser shape {expected:?}")]
    InputShape { expected: Shape, got: Shape },
    #[error("processor on layer {layer} returned {got:?}, expected {expected:?}")]
    ProcessorShape {
        layer: LayerId,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("attention processor failed on layer {layer}: {source}")]
    Processor { layer: LayerId, source: AttnError },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: LatentGrid,
    /// One packet per attention layer, in layer order, when capture was requested.
    pub captured: Vec<AttentionPacket>,
}

/// A noise predictor `ε(x, t)` with hookable self-attention.
pub trait Denoiser: Sync {
    fn shape(&self) -> Shape;

    fn attention_layers(&self) -> &[LayerInfo];

    fn forward(
        &self,
        x: &LatentGrid,
        t: usize,
        processors: &ProcessorMap<'_>,
        capture: bool,
    ) -> Result<ForwardOutput, DenoiserError>;

    /// Unhooked prediction.
    fn predict(&self, x: &LatentGrid, t: usize) -> Result<LatentGrid, DenoiserError> {
        Ok(self.forward(x, t, &ProcessorMap::new(), false)?.eps)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn shape(&self) -> Shape {
        (**self).shape()
    }

    fn attention_layers(&self) -> &[LayerInfo] {
        (**self).attention_layers()
    }

    fn forward(
        &self,
        x: &LatentGrid,
        t: usize,
        processors: &ProcessorMap<'_>,
        capture: bool,
    ) -> Result<ForwardOutput, DenoiserError> {
        (**self).forward(x, t, processors, capture)
    }
}

const CONTENT_DIM: usize = 16;
const POS_FREQS: usize = 4;
const POS_DIM: usize = 4 * POS_FREQS;
const KEY_DIM: usize = CONTENT_DIM + POS_DIM;
const TIME_DIM: usize = 8;
const HIDDEN_DIM: usize = 2 * KEY_DIM;

/// Gains of the toy network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    /// Scale of the latent-to-content projection. Small values keep `ε`
    /// nearly constant along a trajectory, which is what makes deterministic
    /// inversion close to exact.
    pub input_gain: f64,
    /// Amplitude of the position channels; sets attention locality.
    pub position_gain: f64,
    /// Scale of the content part of the query/key projections.
    pub content_qk_gain: f64,
    pub output_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input_gain: 0.002,
            position_gain: 15.0,
            content_qk_gain: 1.0,
            output_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    info: LayerInfo,
    /// Fixed position channels, tokens × POS_DIM.
    position: Matrix,
    bias: Vec<f64>,
    time: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

/// The reference [`Denoiser`]: deterministic weights from a seed.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    shape: Shape,
    seed: u64,
    config: ToyConfig,
    layers: Vec<LayerInfo>,
    w_in: Matrix,
    w_down: Matrix,
    w_up: Matrix,
    w_out: Matrix,
    blocks: Vec<Block>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Matrix {
    // variance gain²/fan_in
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound)).expect("finite weights")
}

/// `[content | position]` projection: random on content, identity on position.
fn block_diag_projection(rng: &mut ChaCha8Rng, content_gain: f64) -> Matrix {
    let content = uniform(rng, CONTENT_DIM, CONTENT_DIM, CONTENT_DIM, content_gain);
    Matrix::from_fn(KEY_DIM, KEY_DIM, |i, j| match (i < CONTENT_DIM, j < CONTENT_DIM) {
        (true, true) => content.get(i, j),
        (false, false) if i == j => 1.0,
        _ => 0.0,
    })
    .expect("finite weights")
}

fn position_channels(resolution: usize, gain: f64) -> Matrix {
    // Frequencies π/2, π/4, ... keep distinct offsets distinct up to 2^(POS_FREQS+1).
    Matrix::from_fn(resolution * resolution, POS_DIM, |tok, j| {
        let (r, c) = ((tok / resolution) as f64, (tok % resolution) as f64);
        let omega = std::f64::consts::PI / f64::from(2u32 << (j / 4));
        let v = match j % 4 {
            0 => (omega * r).cos(),
            1 => (omega * r).sin(),
            2 => (omega * c).cos(),
            _ => (omega * c).sin(),
        };
        gain * v / (POS_FREQS as f64).sqrt()
    })
    .expect("finite position channels")
}

fn time_embedding(t: usize) -> Matrix {
    let t = t as f64;
    Matrix::from_fn(1, TIME_DIM, |_, j| {
        let f = 2e-4 / f64::from(1u32 << (j / 2));
        if j % 2 == 0 {
            (f * t).sin()
        } else {
            (f * t).cos()
        }
    })
    .expect("finite embedding")
}

pub fn build_denoiser(seed: u64, shape: Shape) -> Result<ToyDenoiser, DenoiserError> {
    ToyDenoiser::with_config(seed, shape, ToyConfig::default())
}

impl ToyDenoiser {
    pub fn with_config(seed: u64, shape: Shape, config: ToyConfig) -> Result<Self, DenoiserError> {
        let side = shape.height;
        if shape.channels == 0 || side != shape.width || side < 8 || !side.is_power_of_two() {
            return Err(DenoiserError::UnsupportedShape(shape));
        }
        let gains = [config.input_gain, config.position_gain, config.content_qk_gain, config.output_gain];
        if gains.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(DenoiserError::InvalidConfig(config));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = 4 * shape.channels;
        let w_in = uniform(&mut rng, patch, CONTENT_DIM, patch, config.input_gain);
        let w_down = uniform(&mut rng, CONTENT_DIM, CONTENT_DIM, CONTENT_DIM, 1.0);
        let w_up = uniform(&mut rng, CONTENT_DIM, CONTENT_DIM, CONTENT_DIM, 0.5);
        let w_out = uniform(&mut rng, CONTENT_DIM, patch, CONTENT_DIM, config.output_gain);

        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        for (id, resolution) in [side / 2, side / 4].into_iter().enumerate() {
            let info = LayerInfo { id, resolution, heads: 1, key_dim: KEY_DIM };
            blocks.push(Block {
                info,
                position: position_channels(resolution, config.position_gain),
                bias: (0..CONTENT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                time: uniform(&mut rng, TIME_DIM, CONTENT_DIM, TIME_DIM, 0.5),
                wq: block_diag_projection(&mut rng, config.content_qk_gain),
                wk: block_diag_projection(&mut rng, config.content_qk_gain),
                wv: uniform(&mut rng, KEY_DIM, KEY_DIM, KEY_DIM, 1.0),
                wo: uniform(&mut rng, KEY_DIM, CONTENT_DIM, KEY_DIM, 0.5),
                w1: uniform(&mut rng, KEY_DIM, HIDDEN_DIM, KEY_DIM, 1.0),
                w2: uniform(&mut rng, HIDDEN_DIM, CONTENT_DIM, HIDDEN_DIM, 0.5),
            });
            layers.push(info);
        }
        Ok(Self { shape, seed, config, layers, w_in, w_down, w_up, w_out, blocks })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> ToyConfig {
        self.config
    }

    /// 2×2 pixel patches as token rows: `(side/2)² × 4C`.
    fn patchify(&self, x: &LatentGrid) -> Matrix {
        let res = self.shape.height / 2;
        let c = self.shape.channels;
        let mut data = Vec::with_capacity(res * res * 4 * c);
        for r in 0..res {
            for col in 0..res {
                for ch in 0..c {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        data.push(x.get(ch, 2 * r + dy, 2 * col + dx));
                    }
                }
            }
        }
        Matrix::from_raw(res * res, 4 * c, data)
    }

    fn unpatchify(&self, tokens: &Matrix) -> LatentGrid {
        let res = self.shape.height / 2;
        let c = self.shape.channels;
        let mut out = LatentGrid::zeros(self.shape);
        for r in 0..res {
            for col in 0..res {
                let row = tokens.row(r * res + col);
                for ch in 0..c {
                    for (n, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let idx = out.index(ch, 2 * r + dy, 2 * col + dx);
                        out.data_mut()[idx] = row[ch * 4 + n];
                    }
                }
            }
        }
        out
    }

    fn run_block(
        &self,
        block: &Block,
        content: Matrix,
        t: usize,
        processors: &ProcessorMap<'_>,
        captured: &mut Option<Vec<AttentionPacket>>,
    ) -> Result<Matrix, DenoiserError> {
        let tokens = block.info.tokens();
        let time = ndkernel::matmul(&time_embedding(t), &block.time)?;
        let content = Matrix::from_fn(tokens, CONTENT_DIM, |i, j| {
            content.get(i, j) + time.get(0, j) + block.bias[j]
        })?;
        let h = concat_cols(&content, &block.position);

        let packet = AttentionPacket {
            layer: block.info,
            step: t,
            q: ndkernel::matmul(&h, &block.wq)?,
            k: ndkernel::matmul(&h, &block.wk)?,
            v: ndkernel::matmul(&h, &block.wv)?,
        };
        let attended = match processors.get(block.info.id) {
            Some(p) => {
                let out = p
                    .process(&packet)
                    .map_err(|source| DenoiserError::Processor { layer: block.info.id, source })?;
                if out.shape() != (tokens, KEY_DIM) {
                    return Err(DenoiserError::ProcessorShape {
                        layer: block.info.id,
                        expected: (tokens, KEY_DIM),
                        got: out.shape(),
                    });
                }
                out
            }
            None => packet.vanilla()?,
        };
        if let Some(c) = captured.as_mut() {
            c.push(packet);
        }

        let content = ndkernel::add(&content, &ndkernel::matmul(&attended, &block.wo)?)?;
        let h = concat_cols(&content, &block.position);
        let hidden = ndkernel::map(&ndkernel::matmul(&h, &block.w1)?, |v| v.max(0.0))?;
        Ok(ndkernel::add(&content, &ndkernel::matmul(&hidden, &block.w2)?)?)
    }
}

fn concat_cols(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Matrix::from_raw(a.rows(), cols, data)
}

/// 2×2 average pooling of a `res × res` token grid.
fn pool_tokens(m: &Matrix, res: usize) -> Matrix {
    let half = res / 2;
    Matrix::from_fn(half * half, m.cols(), |tok, j| {
        let (r, c) = (tok / half, tok % half);
        let mut s = 0.0;
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            s += m.get((2 * r + dy) * res + 2 * c + dx, j);
        }
        s / 4.0
    })
    .expect("finite pooled tokens")
}

/// Nearest-neighbour 2× enlargement of a `res × res` token grid.
fn unpool_tokens(m: &Matrix, res: usize) -> Matrix {
    let double = 2 * res;
    Matrix::from_fn(double * double, m.cols(), |tok, j| {
        let (r, c) = (tok / double, tok % double);
        m.get((r / 2) * res + c / 2, j)
    })
    .expect("finite unpooled tokens")
}

impl Denoiser for ToyDenoiser {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn attention_layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn forward(
        &self,
        x: &LatentGrid,
        t: usize,
        processors: &ProcessorMap<'_>,
        capture: bool,
    ) -> Result<ForwardOutput, DenoiserError> {
        if x.shape() != self.shape {
            return Err(DenoiserError::InputShape { expected: self.shape, got: x.shape() });
        }
        let mut captured = capture.then(Vec::new);
        let fine_res = self.blocks[0].info.resolution;

        let fine = ndkernel::matmul(&self.patchify(x), &self.w_in)?;
        let fine = self.run_block(&self.blocks[0], fine, t, processors, &mut captured)?;

        let coarse = ndkernel::matmul(&pool_tokens(&fine, fine_res), &self.w_down)?;
        let coarse = self.run_block(&self.blocks[1], coarse, t, processors, &mut captured)?;

        let up = ndkernel::matmul(&unpool_tokens(&coarse, fine_res / 2), &self.w_up)?;
        let merged = ndkernel::add(&fine, &up)?;
        let eps = self.unpatchify(&ndkernel::matmul(&merged, &self.w_out)?);

        Ok(ForwardOutput { eps, captured: captured.unwrap_or_default() })
    }
}
