//! Mask-aware attention control.
//!
//! Three pieces, all driven by queries `Q` from the branch being edited and
//! keys/values `(K_i, V_i)` injected from the inversion branch at the same
//! step and layer:
//!
//! * background-preserving attention: every query attends only to
//!   background keys;
//! * pixel-wise attention dissolution: each object query drops its top-k
//!   most attended keys together with every object key, then re-normalises
//!   over what is left;
//! * row blending: object tokens take the dissolved output and background
//!   tokens take the background-preserving output.
//!
//! [`PandoraProcessor`] composes them behind the [`AttentionProcessor`]
//! hook. Outside its active step window it falls back to plain attention on
//! the current branch's own `(Q, K, V)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::masking::{TokenMask, TokenMasks};
use crate::ndkernel::{self, KernelError, Matrix, NEG_INF};
use crate::toydenoiser::{AttentionPacket, AttentionProcessor, LayerId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttnError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("mask has no background tokens to attend to")]
    NoBackgroundKeys,
    #[error("every key of object query row {row} would be dissolved; lower the percentile")]
    AllKeysDissolved { row: usize },
    #[error("no injected packet for layer {layer} at step {step}")]
    MissingInjection { layer: LayerId, step: usize },
    #[error("no token mask at resolution {0}")]
    MissingMask(usize),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("percentile {0} outside [0, 1)")]
    InvalidPercentile(f64),
}

/// Inclusive step interval; empty when `start > end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl StepWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// The first `active` of `steps` denoising iterations, which run from
    /// `t = steps` down to `t = 1`.
    pub fn first_iterations(active: usize, steps: usize) -> Self {
        let active = active.min(steps);
        Self { start: steps + 1 - active, end: steps }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissolutionConfig {
    percentile: f64,
    pub active_window: StepWindow,
    /// `None` applies to every layer.
    pub layer_filter: Option<BTreeSet<LayerId>>,
}

impl DissolutionConfig {
    pub fn new(percentile: f64, active_window: StepWindow) -> Result<Self, AttnError> {
        if !(0.0..1.0).contains(&percentile) {
            return Err(AttnError::InvalidPercentile(percentile));
        }
        Ok(Self { percentile, active_window, layer_filter: None })
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = LayerId>) -> Self {
        self.layer_filter = Some(layers.into_iter().collect());
        self
    }

    pub fn percentile(&self) -> f64 {
        self.percentile
    }

    /// `k = ⌈p · keys⌉`. Products within 1e-9 of an integer count as that
    /// integer so that e.g. `0.15 · 20` gives 3, not 4.
    pub fn k_for(&self, keys: usize) -> usize {
        let x = self.percentile * keys as f64;
        let r = x.round();
        let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
        (k as usize).min(keys)
    }

    pub fn is_active(&self, t: usize, layer: LayerId) -> bool {
        self.active_window.contains(t)
            && self.layer_filter.as_ref().is_none_or(|f| f.contains(&layer))
    }
}

/// Dissolved key indices for each object query row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DissolvedSet {
    pub k: usize,
    /// `(query row, sorted key indices)`, rows ascending.
    pub rows: Vec<(usize, Vec<usize>)>,
}

impl DissolvedSet {
    /// Total number of `(row, key)` entries set to the sentinel.
    pub fn count(&self) -> usize {
        self.rows.iter().map(|(_, keys)| keys.len()).sum()
    }

    pub fn row(&self, query: usize) -> Option<&[usize]> {
        self.rows
            .binary_search_by_key(&query, |(q, _)| *q)
            .ok()
            .map(|i| self.rows[i].1.as_slice())
    }
}

fn expect_shape(what: &'static str, m: &Matrix, expected: (usize, usize)) -> Result<(), AttnError> {
    if m.shape() != expected {
        return Err(AttnError::Shape { what, expected, got: m.shape() });
    }
    Ok(())
}

/// `S = Q·Kᵀ/√d`.
pub fn attention_logits(q: &Matrix, k: &Matrix, d: usize) -> Result<Matrix, AttnError> {
    expect_shape("query", q, (q.rows(), d))?;
    expect_shape("key", k, (k.rows(), d))?;
    Ok(ndkernel::scaled_logits(q, k)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TieBreak {
    LowerIndex,
    /// Deliberately wrong; only used as a negative control by `verify`.
    HigherIndex,
}

/// Indices of the `k` largest weights, ties going to the lower index.
/// Returned in ascending index order.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    topk_indices_by(row, k, TieBreak::LowerIndex)
}

pub(crate) fn topk_indices_by(row: &[f64], k: usize, tie: TieBreak) -> Vec<usize> {
    let k = k.min(row.len());
    if k == 0 {
        return Vec::new();
    }
    let order = |&a: &usize, &b: &usize| -> Ordering {
        // -0.0 and 0.0 compare equal here, unlike total_cmp
        let by_value = row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal);
        by_value.then_with(|| match tie {
            TieBreak::LowerIndex => a.cmp(&b),
            TieBreak::HigherIndex => b.cmp(&a),
        })
    };
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

pub fn pad_dissolve(
    s: &Matrix,
    mask: &TokenMask,
    cfg: &DissolutionConfig,
) -> Result<(Matrix, DissolvedSet), AttnError> {
    pad_dissolve_with(s, mask, cfg, Exec::default())
}

/// Sets `S[i, j] = −∞` for every object query `i` and every key `j` in
/// `top-k(softmax(S[i,:])) ∪ object keys`. Background query rows are copied.
pub fn pad_dissolve_with(
    s: &Matrix,
    mask: &TokenMask,
    cfg: &DissolutionConfig,
    exec: Exec,
) -> Result<(Matrix, DissolvedSet), AttnError> {
    pad_dissolve_by(s, mask, cfg, exec, TieBreak::LowerIndex)
}

pub(crate) fn pad_dissolve_by(
    s: &Matrix,
    mask: &TokenMask,
    cfg: &DissolutionConfig,
    exec: Exec,
    tie: TieBreak,
) -> Result<(Matrix, DissolvedSet), AttnError> {
    let n = mask.len();
    expect_shape("logits", s, (n, n))?;
    let k = cfg.k_for(n);
    let objects = mask.object_indices();

    let rows: Vec<Result<Vec<usize>, AttnError>> = exec.map(objects.len(), |r| {
        let i = objects[r];
        let weights = ndkernel::softmax_row(s.row(i))?;
        let mut keys = topk_indices_by(&weights, k, tie);
        keys.extend_from_slice(objects);
        keys.sort_unstable();
        keys.dedup();
        if keys.len() == n {
            return Err(AttnError::AllKeysDissolved { row: i });
        }
        Ok(keys)
    });

    let mut data = s.data().to_vec();
    let mut set = DissolvedSet { k, rows: Vec::with_capacity(objects.len()) };
    for (&i, keys) in objects.iter().zip(rows) {
        let keys = keys?;
        for &j in &keys {
            data[i * n + j] = NEG_INF;
        }
        set.rows.push((i, keys));
    }
    Ok((Matrix::new(n, n, data)?, set))
}

/// Attention restricted to background keys for every query.
pub fn bpa_attention(
    q: &Matrix,
    k_i: &Matrix,
    v_i: &Matrix,
    mask: &TokenMask,
    d: usize,
) -> Result<Matrix, AttnError> {
    expect_shape("injected value", v_i, (mask.len(), v_i.cols()))?;
    Ok(ndkernel::matmul(&bpa_weights(q, k_i, mask, d)?, v_i)?)
}

/// `softmax(S)` with every object key column set to −∞ first.
pub fn bpa_weights(q: &Matrix, k_i: &Matrix, mask: &TokenMask, d: usize) -> Result<Matrix, AttnError> {
    if mask.background_indices().is_empty() {
        return Err(AttnError::NoBackgroundKeys);
    }
    expect_shape("injected key", k_i, (mask.len(), d))?;
    let s = attention_logits(q, k_i, d)?;
    let objects = mask.object_indices();
    let s = if objects.is_empty() {
        s
    } else {
        let cols = s.cols();
        let mut data = s.into_data();
        for row in data.chunks_mut(cols) {
            for &j in objects {
                row[j] = NEG_INF;
            }
        }
        Matrix::new(q.rows(), cols, data)?
    };
    Ok(ndkernel::softmax_rows(&s)?)
}

/// `softmax(S_diss)·V_i`.
pub fn pad_attention(
    q: &Matrix,
    k_i: &Matrix,
    v_i: &Matrix,
    mask: &TokenMask,
    cfg: &DissolutionConfig,
    d: usize,
) -> Result<(Matrix, DissolvedSet), AttnError> {
    pad_attention_by(q, k_i, v_i, mask, cfg, d, TieBreak::LowerIndex)
}

fn pad_attention_by(
    q: &Matrix,
    k_i: &Matrix,
    v_i: &Matrix,
    mask: &TokenMask,
    cfg: &DissolutionConfig,
    d: usize,
    tie: TieBreak,
) -> Result<(Matrix, DissolvedSet), AttnError> {
    expect_shape("injected value", v_i, (mask.len(), v_i.cols()))?;
    let s = attention_logits(q, k_i, d)?;
    let (s_diss, set) = pad_dissolve_by(&s, mask, cfg, Exec::default(), tie)?;
    let b = ndkernel::matmul(&ndkernel::softmax_rows(&s_diss)?, v_i)?;
    Ok((b, set))
}

/// Object rows from `b`, background rows from `sc_bg`.
pub fn blend_outputs(b: &Matrix, sc_bg: &Matrix, mask: &TokenMask) -> Result<Matrix, AttnError> {
    expect_shape("background output", sc_bg, b.shape())?;
    if b.rows() != mask.len() {
        return Err(AttnError::Shape {
            what: "dissolved output",
            expected: (mask.len(), b.cols()),
            got: b.shape(),
        });
    }
    Ok(sc_bg.select_rows(b, |i| mask.is_object(i)))
}

/// Per-layer dissolution statistics for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerDissolution {
    pub k: usize,
    pub dissolved: usize,
}

/// The full removal processor for one denoising step.
pub struct PandoraProcessor<'a> {
    cfg: &'a DissolutionConfig,
    masks: &'a TokenMasks,
    injected: &'a [AttentionPacket],
    step: usize,
    tie: TieBreak,
    stats: Mutex<BTreeMap<LayerId, LayerDissolution>>,
}

pub fn pandora_processor<'a>(
    cfg: &'a DissolutionConfig,
    masks: &'a TokenMasks,
    injected: &'a [AttentionPacket],
    step: usize,
) -> PandoraProcessor<'a> {
    PandoraProcessor {
        cfg,
        masks,
        injected,
        step,
        tie: TieBreak::LowerIndex,
        stats: Mutex::new(BTreeMap::new()),
    }
}

fn find_injected<'p>(
    injected: &'p [AttentionPacket],
    packet: &AttentionPacket,
) -> Result<&'p AttentionPacket, AttnError> {
    injected
        .iter()
        .find(|p| p.layer.id == packet.layer.id && p.step == packet.step)
        .ok_or(AttnError::MissingInjection { layer: packet.layer.id, step: packet.step })
}

impl PandoraProcessor<'_> {
    /// Statistics gathered so far, keyed by layer.
    pub fn stats(&self) -> BTreeMap<LayerId, LayerDissolution> {
        self.stats.lock().expect("stats lock").clone()
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

impl AttentionProcessor for PandoraProcessor<'_> {
    fn process(&self, packet: &AttentionPacket) -> Result<Matrix, AttnError> {
        let layer = packet.layer.id;
        if !self.cfg.is_active(self.step, layer) {
            return Ok(packet.vanilla()?);
        }
        let inj = find_injected(self.injected, packet)?;
        let mask = self
            .masks
            .get(packet.layer.resolution)
            .ok_or(AttnError::MissingMask(packet.layer.resolution))?;
        let d = packet.key_dim();
        let sc_bg = bpa_attention(&packet.q, &inj.k, &inj.v, mask, d)?;
        let (b, set) = pad_attention_by(&packet.q, &inj.k, &inj.v, mask, self.cfg, d, self.tie)?;
        let out = blend_outputs(&b, &sc_bg, mask)?;
        self.stats
            .lock()
            .expect("stats lock")
            .insert(layer, LayerDissolution { k: set.k, dissolved: set.count() });
        Ok(out)
    }
}

/// Plain key/value injection: `Att(Q, K_i, V_i)` inside the window, own
/// attention outside it. The reference that removal collapses to when the
/// mask is empty.
pub struct InjectionProcessor<'a> {
    window: StepWindow,
    injected: &'a [AttentionPacket],
    step: usize,
}

impl<'a> InjectionProcessor<'a> {
    pub fn new(window: StepWindow, injected: &'a [AttentionPacket], step: usize) -> Self {
        Self { window, injected, step }
    }
}

impl AttentionProcessor for InjectionProcessor<'_> {
    fn process(&self, packet: &AttentionPacket) -> Result<Matrix, AttnError> {
        if !self.window.contains(self.step) {
            return Ok(packet.vanilla()?);
        }
        let inj = find_injected(self.injected, packet)?;
        Ok(ndkernel::attention(&packet.q, &inj.k, &inj.v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydenoiser::LayerInfo;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn always(p: f64) -> DissolutionConfig {
        DissolutionConfig::new(p, StepWindow::new(1, 1000)).unwrap()
    }

    /// 4 tokens (2×2 grid), token 3 is object and its logits row is [3,1,2,0].
    fn worked_logits() -> Matrix {
        m(&[&[0.5, 0.1, 0.2, 0.3], &[0.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0], &[3.0, 1.0, 2.0, 0.0]])
    }

    fn worked_mask() -> TokenMask {
        TokenMask::from_object_indices(2, &[3])
    }

    #[test]
    fn logits_examples() {
        let q = m(&[&[1.0]]);
        let k = m(&[&[3.0], &[1.0], &[2.0], &[0.0]]);
        assert_eq!(attention_logits(&q, &k, 1).unwrap().data(), &[3.0, 1.0, 2.0, 0.0]);

        let eye = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        let s = attention_logits(&eye, &eye, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.get(i, j), if i == j { 0.5 } else { 0.0 });
            }
        }
        let zero = Matrix::zeros(3, 4);
        assert!(attention_logits(&zero, &eye, 4).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(attention_logits(&zero, &eye, 3), Err(AttnError::Shape { .. })));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.6, 0.3], 1), vec![1]);
        assert_eq!(topk_indices(&[0.25; 4], 2), vec![0, 1]);
        assert_eq!(topk_indices(&[0.25; 4], 0), Vec::<usize>::new());
        assert_eq!(topk_indices(&[0.2, 0.5], 2), vec![0, 1]);
        assert_eq!(topk_indices_by(&[0.25; 4], 2, TieBreak::HigherIndex), vec![2, 3]);
    }

    fn sort_oracle(row: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        // stable sort keeps lower indices first among equal values
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let mut top = idx[..k].to_vec();
        top.sort_unstable();
        top
    }

    #[test]
    fn topk_matches_sort_oracle_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let row: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(topk_indices(&row, 5), sort_oracle(&row, 5));
    }

    #[test]
    fn dissolve_worked_example() {
        let (s_diss, set) = pad_dissolve(&worked_logits(), &worked_mask(), &always(0.25)).unwrap();
        assert_eq!(set.k, 1);
        assert_eq!(set.row(3), Some(&[0, 3][..]));
        assert_eq!(s_diss.row(3), &[NEG_INF, 1.0, 2.0, NEG_INF]);
        for i in 0..3 {
            assert_eq!(s_diss.row(i), worked_logits().row(i));
        }
    }

    #[test]
    fn dissolve_with_zero_percentile_drops_only_object_keys() {
        let mask = TokenMask::from_object_indices(2, &[1, 3]);
        let (_, set) = pad_dissolve(&worked_logits(), &mask, &always(0.0)).unwrap();
        assert_eq!(set.k, 0);
        for (_, keys) in &set.rows {
            assert_eq!(keys, &vec![1, 3]);
        }
    }

    #[test]
    fn dissolve_with_empty_mask_touches_nothing() {
        let (s_diss, set) = pad_dissolve(&worked_logits(), &TokenMask::empty(2), &always(0.5)).unwrap();
        assert_eq!(s_diss, worked_logits());
        assert!(set.rows.is_empty());
    }

    #[test]
    fn dissolve_reports_exhausted_rows() {
        // 3 object keys + k=1 from the lone background column
        let row: &[f64] = &[0.0, 0.0, 0.0, 5.0];
        let s = m(&[row; 4]);
        let mask = TokenMask::from_object_indices(2, &[0, 1, 2]);
        assert_eq!(
            pad_dissolve(&s, &mask, &always(0.25)).unwrap_err(),
            AttnError::AllKeysDissolved { row: 0 }
        );
        assert!(pad_dissolve(&s, &TokenMask::from_bits(2, vec![true; 4]), &always(0.0)).is_err());
    }

    #[test]
    fn k_rounding() {
        assert_eq!(always(0.05).k_for(256), 13);
        assert_eq!(always(0.15).k_for(20), 3);
        assert_eq!(always(0.25).k_for(64), 16);
        assert_eq!(always(0.01).k_for(64), 1);
        assert_eq!(always(0.0).k_for(64), 0);
        assert!(matches!(DissolutionConfig::new(1.0, StepWindow::new(1, 2)), Err(AttnError::InvalidPercentile(_))));
        assert!(DissolutionConfig::new(-0.1, StepWindow::new(1, 2)).is_err());
    }

    #[test]
    fn windows() {
        let w = StepWindow::first_iterations(45, 50);
        assert_eq!((w.start, w.end), (6, 50));
        assert!(w.contains(6) && w.contains(50) && !w.contains(5));
        assert!(StepWindow::first_iterations(0, 50).is_empty());
        assert_eq!(StepWindow::first_iterations(80, 50).start, 1);
    }

    fn worked_v() -> Matrix {
        m(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, -1.0], &[7.0, 7.0]])
    }

    #[test]
    fn bpa_examples() {
        let q = m(&[&[0.3, -0.2], &[1.0, 0.5], &[-0.4, 0.9], &[0.0, 1.0]]);
        let k = m(&[&[0.1, 0.2], &[0.3, -0.5], &[1.1, 0.0], &[-0.7, 0.4]]);
        let v = worked_v();
        let vanilla = ndkernel::attention(&q, &k, &v).unwrap();
        assert_eq!(bpa_attention(&q, &k, &v, &TokenMask::empty(2), 2).unwrap(), vanilla);

        let single = TokenMask::from_object_indices(2, &[0, 1, 3]);
        let out = bpa_attention(&q, &k, &v, &single, 2).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), v.row(2));
        }

        let all = TokenMask::from_bits(2, vec![true; 4]);
        assert_eq!(bpa_attention(&q, &k, &v, &all, 2).unwrap_err(), AttnError::NoBackgroundKeys);
    }

    #[test]
    fn bpa_worked_row() {
        // d = 1 so that the query row's logits are exactly [3, 1, 2, 0]
        let one: &[f64] = &[1.0];
        let q = m(&[one; 4]);
        let k = m(&[&[3.0], &[1.0], &[2.0], &[0.0]]);
        let v = m(&[&[1.0], &[10.0], &[100.0], &[1000.0]]);
        let out = bpa_attention(&q, &k, &v, &worked_mask(), 1).unwrap();
        let (e3, e1, e2) = (3f64.exp(), 1f64.exp(), 2f64.exp());
        let z = e3 + e1 + e2;
        let want = (e3 * 1.0 + e1 * 10.0 + e2 * 100.0) / z;
        assert!((out.get(3, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn pad_attention_worked_row() {
        let one: &[f64] = &[1.0];
        let q = m(&[one; 4]);
        let k = m(&[&[3.0], &[1.0], &[2.0], &[0.0]]);
        let v = worked_v();
        let (b, set) = pad_attention(&q, &k, &v, &worked_mask(), &always(0.25), 1).unwrap();
        assert_eq!(set.row(3), Some(&[0, 3][..]));
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        let (w1, w2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        assert!((w1 - 0.26894).abs() < 1e-5 && (w2 - 0.73106).abs() < 1e-5);
        for c in 0..2 {
            assert!((b.get(3, c) - (w1 * v.get(1, c) + w2 * v.get(2, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_attention_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        let k = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        let v = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        let (b, _) = pad_attention(&q, &k, &v, &TokenMask::empty(2), &always(0.0), 3).unwrap();
        assert_eq!(b, ndkernel::attention(&q, &k, &v).unwrap());
        let (b, _) = pad_attention(&q, &k, &Matrix::zeros(4, 3), &worked_mask(), &always(0.25), 3).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn blend_examples() {
        let b = Matrix::from_fn(4, 2, |i, j| (10 * i + j) as f64).unwrap();
        let sc = Matrix::from_fn(4, 2, |i, j| -((10 * i + j) as f64) - 1.0).unwrap();
        assert_eq!(blend_outputs(&b, &sc, &TokenMask::empty(2)).unwrap(), sc);
        assert_eq!(blend_outputs(&b, &sc, &TokenMask::from_bits(2, vec![true; 4])).unwrap(), b);
        let o = blend_outputs(&b, &sc, &worked_mask()).unwrap();
        for i in 0..3 {
            assert_eq!(o.row(i), sc.row(i));
        }
        assert_eq!(o.row(3), b.row(3));
        assert!(blend_outputs(&b, &Matrix::zeros(4, 3), &worked_mask()).is_err());
    }

    fn packet(rng: &mut ChaCha8Rng, id: LayerId, resolution: usize, step: usize, d: usize) -> AttentionPacket {
        let n = resolution * resolution;
        let mut r = || Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        AttentionPacket {
            layer: LayerInfo { id, resolution, heads: 1, key_dim: d },
            step,
            q: r(),
            k: r(),
            v: r(),
        }
    }

    #[test]
    fn processor_gating_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let current = packet(&mut rng, 0, 4, 10, 5);
        let injected = vec![packet(&mut rng, 0, 4, 10, 5)];
        let object = crate::masking::ObjectMask::from_fn(8, 8, |y, x| y < 2 && x < 4);
        let masks = TokenMasks::build(&object, [4]).unwrap();
        let mask = masks.get(4).unwrap();

        // outside the window: own vanilla attention
        let cfg = DissolutionConfig::new(0.1, StepWindow::new(11, 20)).unwrap();
        let proc_ = pandora_processor(&cfg, &masks, &injected, 10);
        assert_eq!(proc_.process(&current).unwrap(), current.vanilla().unwrap());
        assert!(proc_.stats().is_empty());

        // layer filtered out
        let cfg = DissolutionConfig::new(0.1, StepWindow::new(1, 20)).unwrap().with_layers([7]);
        let proc_ = pandora_processor(&cfg, &masks, &injected, 10);
        assert_eq!(proc_.process(&current).unwrap(), current.vanilla().unwrap());

        // inside: blend of PAD and BPA
        let cfg = DissolutionConfig::new(0.1, StepWindow::new(1, 20)).unwrap();
        let proc_ = pandora_processor(&cfg, &masks, &injected, 10);
        let out = proc_.process(&current).unwrap();
        let inj = &injected[0];
        let sc = bpa_attention(&current.q, &inj.k, &inj.v, mask, 5).unwrap();
        let (b, set) = pad_attention(&current.q, &inj.k, &inj.v, mask, &cfg, 5).unwrap();
        assert_eq!(out, blend_outputs(&b, &sc, mask).unwrap());
        assert_eq!(proc_.stats()[&0], LayerDissolution { k: 2, dissolved: set.count() });

        // empty mask inside the window: injected attention over all keys
        let empty = TokenMasks::build(&crate::masking::ObjectMask::empty(8, 8), [4]).unwrap();
        let proc_ = pandora_processor(&cfg, &empty, &injected, 10);
        assert_eq!(
            proc_.process(&current).unwrap(),
            ndkernel::attention(&current.q, &inj.k, &inj.v).unwrap()
        );

        // missing injection
        let proc_ = pandora_processor(&cfg, &masks, &[], 10);
        assert_eq!(
            proc_.process(&current).unwrap_err(),
            AttnError::MissingInjection { layer: 0, step: 10 }
        );
    }

    #[test]
    fn dissolve_strategies_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = Matrix::from_fn(64, 64, |_, _| rng.gen_range(-4.0..4.0)).unwrap();
        let mask = TokenMask::from_bits(8, (0..64).map(|i| i % 5 == 0).collect());
        let reference = pad_dissolve_with(&s, &mask, &always(0.05), Exec::Sequential).unwrap();
        for &exec in Exec::available() {
            assert_eq!(pad_dissolve_with(&s, &mask, &always(0.05), exec).unwrap(), reference);
        }
    }

    fn quantized_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((-40i32..40).prop_map(|v| f64::from(v) * 0.25), 1..=256)
    }

    proptest! {
        #[test]
        fn topk_equals_sort_oracle(row in quantized_row(), frac in 0.0..=1.0f64) {
            let k = ((row.len() as f64) * frac) as usize;
            prop_assert_eq!(topk_indices(&row, k), sort_oracle(&row, k));
        }

        #[test]
        fn topk_over_logits_equals_topk_over_weights(row in quantized_row(), frac in 0.0..=1.0f64) {
            let k = ((row.len() as f64) * frac) as usize;
            let weights = ndkernel::softmax_row(&row).unwrap();
            prop_assert_eq!(topk_indices(&row, k), topk_indices(&weights, k));
        }

        #[test]
        fn dissolved_entries_get_zero_weight(seed in any::<u64>(), side in 2usize..=8, p in 0.0..0.3f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = side * side;
            let s = Matrix::from_fn(n, n, |_, _| rng.gen_range(-6.0..6.0)).unwrap();
            let mask = TokenMask::from_bits(side, (0..n).map(|_| rng.gen_bool(0.2)).collect());
            if let Ok((s_diss, set)) = pad_dissolve(&s, &mask, &always(p)) {
                let w = ndkernel::softmax_rows(&s_diss).unwrap();
                for (i, keys) in &set.rows {
                    prop_assert!(mask.is_object(*i));
                    for j in keys {
                        prop_assert_eq!(w.get(*i, *j), 0.0);
                    }
                    for j in mask.object_indices() {
                        prop_assert!(keys.contains(j));
                    }
                    prop_assert!(keys.iter().filter(|j| !mask.is_object(**j)).count() <= set.k);
                    let sum: f64 = w.row(*i).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                }
                for i in mask.background_indices() {
                    prop_assert_eq!(s_diss.row(*i), s.row(*i));
                }
            }
        }

        #[test]
        fn dissolved_sets_grow_with_percentile(seed in any::<u64>(), p1 in 0.0..0.3f64, dp in 0.0..0.3f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 36;
            let s = Matrix::from_fn(n, n, |_, _| rng.gen_range(-3.0..3.0)).unwrap();
            let mask = TokenMask::from_bits(6, (0..n).map(|_| rng.gen_bool(0.15)).collect());
            let small = pad_dissolve(&s, &mask, &always(p1)).unwrap().1;
            let large = pad_dissolve(&s, &mask, &always(p1 + dp)).unwrap().1;
            for ((i, a), (j, b)) in small.rows.iter().zip(&large.rows) {
                prop_assert_eq!(i, j);
                prop_assert!(a.iter().all(|x| b.contains(x)));
            }
        }
    }
}
