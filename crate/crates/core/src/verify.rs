//! Built-in invariant suite behind `pandora verify`.
//!
//! Every check draws its random cases from a ChaCha stream keyed by the
//! suite seed, so a failing seed reproduces exactly. The end-to-end checks
//! use the toy denoiser built from the same seed on the standard 4×32×32
//! scene.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attnctl::{
    self, blend_outputs, bpa_attention, bpa_weights, pad_dissolve_by, DissolutionConfig, StepWindow, TieBreak,
};
use crate::exec::Exec;
use crate::guidance::{ladg_blend, NoisePair};
use crate::latent::{LatentGrid, Shape};
use crate::masking::{ObjectMask, TokenMask, TokenMasks};
use crate::metrics::masked_divergence;
use crate::ndkernel::{self, Matrix};
use crate::pipeline::{scene, Removal, RemovalConfig, RunReport};
use crate::scheduler::{invert, make_schedule, sample};
use crate::toydenoiser::{build_denoiser, Denoiser, ProcessorMap, ToyDenoiser};

/// Percentiles of the sweep check.
pub const SWEEP_PERCENTILES: [f64; 5] = [0.01, 0.03, 0.05, 0.15, 0.25];

/// Deliberate defects for exercising the suite itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Top-k breaks ties toward the higher index.
    FlipTieBreak,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl VerifyOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, fault: None }
    }

    fn tie(&self) -> TieBreak {
        match self.fault {
            Some(Fault::FlipTieBreak) => TieBreak::HigherIndex,
            None => TieBreak::LowerIndex,
        }
    }

    fn rng(&self, check: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(check);
        rng
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<32} {:>8.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

type Check = fn(&VerifyOptions) -> Result<String, String>;

const CHECKS: [(u8, &str, Check, Option<u64>); 10] = [
    (1, "dissolution nullification", check_dissolution, Some(10)),
    (2, "top-k oracle equivalence", check_topk, Some(10)),
    (3, "background-only attention", check_bpa, None),
    (4, "blend row selection", check_blend, None),
    (5, "guidance identities", check_guidance, None),
    (6, "ddim round trip", check_round_trip, Some(10)),
    (7, "empty-mask collapse", check_empty_mask, None),
    (8, "background preservation", check_background, None),
    (9, "percentile superset monotonicity", check_monotone, None),
    (10, "pipeline determinism", check_determinism, None),
];

pub fn check_ids() -> impl Iterator<Item = u8> {
    CHECKS.iter().map(|c| c.0)
}

pub fn run_check(id: u8, opts: &VerifyOptions) -> Option<CheckOutcome> {
    let &(id, name, check, limit) = CHECKS.iter().find(|c| c.0 == id)?;
    let started = Instant::now();
    let result = check(opts);
    let elapsed = started.elapsed();
    let (mut passed, mut detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if let Some(secs) = limit {
        if elapsed > Duration::from_secs(secs) {
            passed = false;
            detail = format!("{detail}; took longer than {secs}s");
        }
    }
    Some(CheckOutcome { id, name, passed, detail, elapsed })
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    check_ids().filter_map(|id| run_check(id, opts)).collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale)).expect("finite")
}

/// `resolution²` tokens with between 1 and `max_objects` object tokens and
/// at least one background token.
fn random_token_mask(rng: &mut ChaCha8Rng, resolution: usize, max_objects: usize) -> TokenMask {
    let n = resolution * resolution;
    let m = rng.gen_range(1..=max_objects.clamp(1, n - 1));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut bits = vec![false; n];
    for &i in &idx[..m] {
        bits[i] = true;
    }
    TokenMask::from_bits(resolution, bits)
}

/// Logit rows with frequent exact ties.
fn random_logits(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Matrix {
    let coarse = rng.gen_bool(0.5);
    Matrix::from_fn(rows, n, |_, _| {
        if coarse {
            f64::from(rng.gen_range(-4i32..=4))
        } else {
            rng.gen_range(-6.0..6.0)
        }
    })
    .expect("finite")
}

/// Full-sort reference: indices ordered by value descending then index
/// ascending, first `k`, returned ascending.
fn topk_by_sort(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx.sort_unstable();
    idx
}

fn check_dissolution(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = opts.rng(1);
    let mut entries = 0usize;
    for case in 0..1000 {
        let res = rng.gen_range(4..=16);
        let n = res * res;
        let mask = random_token_mask(&mut rng, res, n / 2);
        let p = rng.gen_range(0.0..0.3);
        let cfg = DissolutionConfig::new(p, StepWindow::new(1, 1)).map_err(|e| e.to_string())?;
        let s = random_logits(&mut rng, n, n);
        let (s_diss, set) =
            pad_dissolve_by(&s, &mask, &cfg, Exec::default(), opts.tie()).map_err(|e| format!("case {case}: {e}"))?;
        let w = ndkernel::softmax_rows(&s_diss).map_err(|e| e.to_string())?;
        for (i, keys) in &set.rows {
            let row = w.row(*i);
            for &j in keys {
                ensure(row[j] == 0.0, || format!("case {case}: weight {} at dissolved ({i}, {j})", row[j]))?;
            }
            let sum: f64 = row.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-12, || format!("case {case}: row {i} sums to {sum}"))?;
            let weights = ndkernel::softmax_row(s.row(*i)).map_err(|e| e.to_string())?;
            let mut want = topk_by_sort(&weights, cfg.k_for(n));
            want.extend_from_slice(mask.object_indices());
            want.sort_unstable();
            want.dedup();
            ensure(&want == keys, || format!("case {case}: row {i} dissolved set differs from reference"))?;
            entries += keys.len();
        }
        for i in mask.background_indices() {
            ensure(s_diss.row(*i) == s.row(*i), || format!("case {case}: background row {i} changed"))?;
        }
    }
    Ok(format!("1000 cases, {entries} dissolved entries at weight 0"))
}

fn check_topk(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = opts.rng(2);
    let mut mismatches = 0;
    let mut first = None;
    for case in 0..10_000 {
        let len = rng.gen_range(1..=256);
        let row: Vec<f64> = if rng.gen_bool(0.5) {
            (0..len).map(|_| f64::from(rng.gen_range(0..6))).collect()
        } else {
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let k = rng.gen_range(0..=len);
        if attnctl::topk_indices_by(&row, k, opts.tie()) != topk_by_sort(&row, k) {
            mismatches += 1;
            first.get_or_insert(case);
        }
    }
    match first {
        None => Ok("10000 rows, 0 mismatches".into()),
        Some(case) => Err(format!("{mismatches} mismatches, first at row {case}")),
    }
}

fn check_bpa(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = opts.rng(3);
    for case in 0..200 {
        let res = [2, 4, 8][rng.gen_range(0..3)];
        let n = res * res;
        let d = [4, 8, 16][rng.gen_range(0..3)];
        let dv = rng.gen_range(1..=8);
        let q = random_matrix(&mut rng, n, d, 2.0);
        let k = random_matrix(&mut rng, n, d, 2.0);
        let v = random_matrix(&mut rng, n, dv, 1.0);
        let mask = random_token_mask(&mut rng, res, n - 1);
        let err = |e: attnctl::AttnError| format!("case {case}: {e}");

        let w = bpa_weights(&q, &k, &mask, d).map_err(err)?;
        for i in 0..n {
            for &j in mask.object_indices() {
                ensure(w.get(i, j) == 0.0, || format!("case {case}: weight {} on object key {j}", w.get(i, j)))?;
            }
        }
        // object values must not reach the output at all
        let out = bpa_attention(&q, &k, &v, &mask, d).map_err(err)?;
        let scrambled = Matrix::from_fn(n, dv, |i, j| if mask.is_object(i) { 1e6 * (i + j + 1) as f64 } else { v.get(i, j) })
            .expect("finite");
        let out2 = bpa_attention(&q, &k, &scrambled, &mask, d).map_err(err)?;
        ensure(out == out2, || format!("case {case}: object values leaked into the output"))?;

        let vanilla = ndkernel::attention(&q, &k, &v).map_err(|e| e.to_string())?;
        let empty = bpa_attention(&q, &k, &v, &TokenMask::empty(res), d).map_err(err)?;
        ensure(bits(empty.data()) == bits(vanilla.data()), || {
            format!("case {case}: empty mask differs from injected attention")
        })?;
    }
    Ok("200 packets".into())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn check_blend(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = opts.rng(4);
    for case in 0..200 {
        let res = rng.gen_range(2..=8);
        let n = res * res;
        let d = rng.gen_range(1..=16);
        let b = random_matrix(&mut rng, n, d, 3.0);
        let sc = random_matrix(&mut rng, n, d, 3.0);
        let mask = random_token_mask(&mut rng, res, n - 1);
        let out = blend_outputs(&b, &sc, &mask).map_err(|e| format!("case {case}: {e}"))?;
        for i in 0..n {
            let src = if mask.is_object(i) { &b } else { &sc };
            ensure(bits(out.row(i)) == bits(src.row(i)), || format!("case {case}: row {i} taken from the wrong source"))?;
        }
    }
    Ok("200 cases".into())
}

fn check_guidance(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = opts.rng(5);
    for case in 0..200 {
        let shape = Shape::new(rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let grid = |rng: &mut ChaCha8Rng| LatentGrid::from_fn(shape, |_, _, _| rng.gen_range(-2.0..2.0));
        let pair = NoisePair::new(grid(&mut rng), grid(&mut rng)).map_err(|e| e.to_string())?;
        let flags = (0..shape.plane()).map(|_| rng.gen_bool(0.5)).collect();
        let mask = ObjectMask::new(shape.width, shape.height, flags).map_err(|e| e.to_string())?;
        let blend = |m: &ObjectMask, a: f64| ladg_blend(&pair, m, a).map_err(|e| format!("case {case}: {e}"));

        ensure(bits(blend(&mask, 1.0)?.data()) == bits(pair.eps_c.data()), || format!("case {case}: α = 1 is not ε_c"))?;
        let alpha = rng.gen_range(0.0..3.0);
        let empty = ObjectMask::empty(shape.width, shape.height);
        ensure(bits(blend(&empty, alpha)?.data()) == bits(pair.eps_c.data()), || {
            format!("case {case}: empty mask is not ε_c")
        })?;

        let h = 1e-3;
        let (hi, lo) = (blend(&mask, alpha + h)?, blend(&mask, alpha - h)?);
        let plane = shape.plane();
        for idx in 0..shape.len() {
            let slope = (hi.data()[idx] - lo.data()[idx]) / (2.0 * h);
            let want = if mask.bits()[idx % plane] { pair.eps_c.data()[idx] - pair.eps_u.data()[idx] } else { 0.0 };
            ensure((slope - want).abs() <= 1e-10, || format!("case {case}: slope {slope} vs {want} at {idx}"))?;
        }
    }
    Ok("200 cases".into())
}

fn scene_and_denoiser(seed: u64) -> Result<(LatentGrid, ObjectMask, ToyDenoiser), String> {
    let (image, mask) = scene::standard(4);
    let d = build_denoiser(seed, image.shape()).map_err(|e| e.to_string())?;
    Ok((image, mask, d))
}

fn round_trip_error(image: &LatentGrid, d: &ToyDenoiser, steps: usize) -> Result<f64, String> {
    let sched = make_schedule(steps).map_err(|e| e.to_string())?;
    let trace = invert(image, d, &sched).map_err(|e| e.to_string())?;
    let back = sample(trace.x_final(), d, &sched).map_err(|e| e.to_string())?;
    back.max_abs_diff(image).map_err(|e| e.to_string())
}

fn check_round_trip(opts: &VerifyOptions) -> Result<String, String> {
    let (image, _, d) = scene_and_denoiser(opts.seed)?;
    let err = round_trip_error(&image, &d, 50)?;
    ensure(err <= 1e-3, || format!("max-abs {err:.3e} > 1e-3"))?;
    Ok(format!("max-abs {err:.3e}"))
}

fn check_empty_mask(opts: &VerifyOptions) -> Result<String, String> {
    let (image, _, d) = scene_and_denoiser(opts.seed)?;
    let empty = ObjectMask::empty(32, 32);
    let session = Removal::prepare(&image, &empty, &d, 50).map_err(|e| e.to_string())?;
    let cfg = RemovalConfig { seed: opts.seed, ..RemovalConfig::default() };
    let reconstruction = session.injection_only(&cfg).map_err(|e| e.to_string())?;
    let (out, _) = session.run(&cfg).map_err(|e| e.to_string())?;
    let diff = out.max_abs_diff(&reconstruction).map_err(|e| e.to_string())?;
    ensure(diff <= 1e-3, || format!("max-abs {diff:.3e} > 1e-3"))?;

    let plain = RemovalConfig { percentile: 0.0, alpha: crate::guidance::GuidanceSchedule::Constant { alpha: 1.0 }, ..cfg };
    let (out, _) = session.run(&plain).map_err(|e| e.to_string())?;
    ensure(bits(out.data()) == bits(reconstruction.data()), || "p = 0, α = 1 is not bit-identical".into())?;
    Ok(format!("max-abs {diff:.3e}; p = 0, α = 1 bit-identical"))
}

/// Pixels whose token is background at every attention resolution.
pub fn background_everywhere(mask: &ObjectMask, masks: &TokenMasks) -> ObjectMask {
    let (h, w) = (mask.height(), mask.width());
    ObjectMask::from_fn(w, h, |y, x| {
        !masks.iter().any(|(&r, tm)| tm.is_object((y * r / h) * r + x * r / w))
    })
}

fn check_background(opts: &VerifyOptions) -> Result<String, String> {
    let (image, mask, d) = scene_and_denoiser(opts.seed)?;
    let session = Removal::prepare(&image, &mask, &d, 50).map_err(|e| e.to_string())?;
    let cfg = RemovalConfig { seed: opts.seed, ..RemovalConfig::default() };
    let reconstruction = session.injection_only(&cfg).map_err(|e| e.to_string())?;
    let (out, _) = session.run(&cfg).map_err(|e| e.to_string())?;

    let keep = background_everywhere(&mask, session.token_masks());
    let shape = image.shape();
    let mut worst = 0.0f64;
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                if keep.get(y, x) {
                    worst = worst.max((out.get(c, y, x) - reconstruction.get(c, y, x)).abs());
                }
            }
        }
    }
    let floor = sample(session.trace().x_final(), &d, &make_schedule(50).map_err(|e| e.to_string())?)
        .and_then(|b| Ok(b.max_abs_diff(&image)?))
        .map_err(|e| e.to_string())?;
    let divergence = masked_divergence(&out, &image, &mask).map_err(|e| e.to_string())?;
    ensure(worst <= 1e-2, || format!("background max-abs {worst:.3e} > 1e-2"))?;
    ensure(divergence > 10.0 * floor, || format!("masked divergence {divergence:.3e} ≤ 10 × floor {floor:.3e}"))?;
    Ok(format!("background max-abs {worst:.3e}; masked divergence {divergence:.3e} vs floor {floor:.3e}"))
}

fn check_monotone(opts: &VerifyOptions) -> Result<String, String> {
    let (image, mask, d) = scene_and_denoiser(opts.seed)?;
    let masks = TokenMasks::build(&mask, d.attention_layers().iter().map(|l| l.resolution)).map_err(|e| e.to_string())?;

    // nested dissolved sets on the logits the denoiser actually produces
    let steps = 50;
    let out = d.forward(&image, steps, &ProcessorMap::new(), true).map_err(|e| e.to_string())?;
    let mut ks = Vec::new();
    for packet in &out.captured {
        let tm = masks.get(packet.layer.resolution).ok_or("missing token mask")?;
        let s = attnctl::attention_logits(&packet.q, &packet.k, packet.key_dim()).map_err(|e| e.to_string())?;
        let mut previous: Option<attnctl::DissolvedSet> = None;
        for &p in &SWEEP_PERCENTILES {
            let cfg = DissolutionConfig::new(p, StepWindow::new(1, steps)).map_err(|e| e.to_string())?;
            let (_, set) = pad_dissolve_by(&s, tm, &cfg, Exec::default(), opts.tie()).map_err(|e| e.to_string())?;
            if let Some(prev) = &previous {
                for ((i, small), (_, large)) in prev.rows.iter().zip(&set.rows) {
                    ensure(small.iter().all(|j| large.binary_search(j).is_ok()), || {
                        format!("layer {} row {i}: set at p = {p} misses keys from the smaller p", packet.layer.id)
                    })?;
                }
            }
            ks.push(set.k);
            previous = Some(set);
        }
    }

    let session = Removal::prepare(&image, &mask, &d, steps).map_err(|e| e.to_string())?;
    let base = RemovalConfig { seed: opts.seed, ..RemovalConfig::default() };
    let mut counts = Vec::new();
    for entry in session.sweep(&base, &SWEEP_PERCENTILES) {
        let (_, report) = entry.outcome.map_err(|e| format!("p = {}: {e}", entry.percentile))?;
        counts.push(report.total_dissolved());
    }
    ensure(counts.windows(2).all(|w| w[0] <= w[1]), || format!("report counts not monotone: {counts:?}"))?;
    Ok(format!("k per layer {ks:?}; report counts {counts:?}"))
}

/// Report JSON with the wall-clock field removed.
pub fn report_fingerprint(report: &RunReport) -> Vec<u8> {
    let mut v = serde_json::to_value(report).expect("serializable report");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("wall_ms");
    }
    serde_json::to_vec(&v).expect("serializable value")
}

fn check_determinism(opts: &VerifyOptions) -> Result<String, String> {
    let (image, mask, _) = scene_and_denoiser(opts.seed)?;
    let cfg = RemovalConfig { seed: opts.seed, ..RemovalConfig::default() };
    let run = || {
        let d = build_denoiser(cfg.seed, image.shape()).map_err(|e| e.to_string())?;
        crate::pipeline::remove_objects(&image, &mask, &d, &cfg).map_err(|e| e.to_string())
    };
    let (a, ra) = run()?;
    let (b, rb) = run()?;
    ensure(bits(a.data()) == bits(b.data()), || "outputs differ between identical runs".into())?;
    ensure(report_fingerprint(&ra) == report_fingerprint(&rb), || "reports differ between identical runs".into())?;
    Ok("two runs bit-identical".into())
}
