//! Dense row-major `f64` kernels shared by the attention, denoiser and
//! guidance code.
//!
//! Reductions use a fixed loop order so results are bit-identical for a
//! given input, whatever [`Exec`] strategy runs them. The value
//! [`NEG_INF`] is the one non-finite value a [`Matrix`] may hold: it marks
//! entries that a softmax must exclude.

use std::fmt;

use thiserror::Error;

use crate::exec::Exec;

/// Marker for "excluded from softmax".
pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[inline]
pub fn is_sentinel(x: f64) -> bool {
    x == NEG_INF
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix would contain NaN or +inf")]
    NotFinite,
    #[error("softmax row has every entry excluded")]
    AllExcluded,
    #[error("scale factor {0} must be finite and nonzero")]
    InvalidScale(f64),
}

pub type Result<T> = std::result::Result<T, KernelError>;

fn admissible(x: f64) -> bool {
    x.is_finite() || is_sentinel(x)
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(KernelError::LengthMismatch { rows, cols, len: data.len() });
        }
        if !data.iter().all(|&x| admissible(x)) {
            return Err(KernelError::NotFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.data[i * self.cols + j]);
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    /// Copy with row `i` taken from `other` wherever `pick(i)` holds.
    pub(crate) fn select_rows(&self, other: &Matrix, pick: impl Fn(usize) -> bool) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        let mut data = self.data.clone();
        for i in (0..self.rows).filter(|&i| pick(i)) {
            let span = i * self.cols..(i + 1) * self.cols;
            data[span.clone()].copy_from_slice(&other.data[span]);
        }
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Builds a matrix without validation. Callers guarantee admissibility.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(rows * cols, data.len());
        Matrix { rows, cols, data }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Exec::default())
}

/// `a · b`, each output entry accumulated over the inner index in ascending order.
pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(KernelError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, inner, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    exec.for_each_row(&mut out, m, |i, row| {
        let lhs = &a.data[i * inner..(i + 1) * inner];
        for (kk, &x) in lhs.iter().enumerate() {
            let rhs = &b.data[kk * m..(kk + 1) * m];
            for (o, &y) in row.iter_mut().zip(rhs) {
                *o += x * y;
            }
        }
    });
    if !out.iter().all(|x| x.is_finite()) {
        return Err(KernelError::NotFinite);
    }
    Ok(Matrix { rows: n, cols: m, data: out })
}

/// Multiplies every non-sentinel entry by `s`.
pub fn scale(a: &Matrix, s: f64) -> Result<Matrix> {
    if !s.is_finite() || s == 0.0 {
        return Err(KernelError::InvalidScale(s));
    }
    let data: Vec<f64> = a
        .data
        .iter()
        .map(|&x| if is_sentinel(x) { x } else { x * s })
        .collect();
    if !data.iter().all(|&x| admissible(x)) {
        return Err(KernelError::NotFinite);
    }
    Ok(Matrix { rows: a.rows, cols: a.cols, data })
}

/// Max-stabilised softmax. Sentinel entries come out as exactly `0.0`.
pub fn softmax_row(row: &[f64]) -> Result<Vec<f64>> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .filter(|&x| !is_sentinel(x))
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(KernelError::AllExcluded)?;
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if is_sentinel(*v) { 0.0 } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    softmax_rows_with(m, Exec::default())
}

pub fn softmax_rows_with(m: &Matrix, exec: Exec) -> Result<Matrix> {
    if m.cols == 0 && m.rows > 0 {
        return Err(KernelError::AllExcluded);
    }
    // Validate first so the parallel pass cannot fail.
    for i in 0..m.rows {
        if m.row(i).iter().all(|&x| is_sentinel(x)) {
            return Err(KernelError::AllExcluded);
        }
    }
    let mut data = m.data.clone();
    exec.for_each_row(&mut data, m.cols, |_, row| {
        softmax_in_place(row).expect("row validated");
    });
    Ok(Matrix { rows: m.rows, cols: m.cols, data })
}

/// `softmax(q·kᵀ / √d) · v` with `d = q.cols()`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let weights = softmax_rows(&scaled_logits(q, k)?)?;
    matmul(&weights, v)
}

/// `q·kᵀ / √d` with `d = q.cols()`.
pub fn scaled_logits(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(KernelError::DimensionMismatch {
            op: "logits",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let d = q.cols.max(1) as f64;
    scale(&matmul(q, &k.transpose())?, 1.0 / d.sqrt())
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(KernelError::DimensionMismatch { op: "add", left: a.shape(), right: b.shape() });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Matrix::new(a.rows, a.cols, data)
}

pub fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    Matrix::new(a.rows, a.cols, a.data.iter().map(|&x| f(x)).collect())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);

        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a),
            Err(KernelError::DimensionMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmax_row(&[NEG_INF, 1.0, 2.0, NEG_INF]).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[3], 0.0);
        assert!((w[1] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((w[2] - e2 / (e1 + e2)).abs() < 1e-15);
        assert!((w[1] - 0.26894).abs() < 1e-5);
        assert!((w[2] - 0.73106).abs() < 1e-5);
        assert_eq!(softmax_row(&[NEG_INF, NEG_INF]), Err(KernelError::AllExcluded));
        assert_eq!(softmax_row(&[]), Err(KernelError::AllExcluded));
    }

    #[test]
    fn scale_examples() {
        let a = Matrix::from_rows(&[[2.0, 4.0]]).unwrap();
        assert_eq!(scale(&a, 0.5).unwrap().data(), &[1.0, 2.0]);
        let s = Matrix::from_rows(&[[NEG_INF, 3.0]]).unwrap();
        assert_eq!(scale(&s, 2.0).unwrap().data(), &[NEG_INF, 6.0]);
        assert_eq!(scale(&a, 0.0), Err(KernelError::InvalidScale(0.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random(&mut rng, 3, 3);
        let f = 1.0 / 64f64.sqrt();
        let scaled = scale(&m, f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(scaled.get(i, j), m.get(i, j) * f);
            }
        }
    }

    #[test]
    fn nan_is_never_stored() {
        assert_eq!(Matrix::new(1, 1, vec![f64::NAN]), Err(KernelError::NotFinite));
        assert_eq!(Matrix::new(1, 1, vec![f64::INFINITY]), Err(KernelError::NotFinite));
        assert!(Matrix::new(1, 1, vec![NEG_INF]).is_ok());
        // -inf · 0 would be NaN
        let a = Matrix::new(1, 1, vec![NEG_INF]).unwrap();
        assert_eq!(matmul(&a, &Matrix::zeros(1, 1)), Err(KernelError::NotFinite));
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 4, 6);
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().get(5, 3), m.get(3, 5));
    }

    fn row_with_sentinels() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![3 => -50.0..50.0f64, 1 => Just(NEG_INF)], 1..64)
            .prop_filter("needs a live entry", |r| r.iter().any(|&x| !is_sentinel(x)))
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(row in row_with_sentinels()) {
            let w = softmax_row(&row).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (x, p) in row.iter().zip(&w) {
                prop_assert!(*p >= 0.0);
                if is_sentinel(*x) {
                    prop_assert_eq!(*p, 0.0);
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(row in row_with_sentinels(), c in -100.0..100.0f64) {
            let shifted: Vec<f64> = row.iter().map(|&x| if is_sentinel(x) { x } else { x + c }).collect();
            let a = softmax_row(&row).unwrap();
            let b = softmax_row(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn matmul_exact_on_integers(seed in any::<u64>(), n in 1usize..12, k in 1usize..12, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_fn(n, k, |_, _| rng.gen_range(-20i32..20) as f64).unwrap();
            let b = Matrix::from_fn(k, m, |_, _| rng.gen_range(-20i32..20) as f64).unwrap();
            let got = matmul(&a, &b).unwrap();
            let want = naive_matmul(&a, &b);
            prop_assert_eq!(got.data(), want.as_slice());
        }

        #[test]
        fn matmul_close_to_oracle_up_to_64(seed in any::<u64>(), n in 1usize..=64, k in 1usize..=64, m in 1usize..=64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, n, k);
            let b = random(&mut rng, k, m);
            let got = matmul(&a, &b).unwrap();
            let want = naive_matmul(&a, &b);
            for (g, w) in got.data().iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
            }
        }

        #[test]
        fn strategies_agree_bitwise(seed in any::<u64>(), n in 1usize..40, k in 1usize..40, m in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, n, k);
            let b = random(&mut rng, k, m);
            let reference = matmul_with(&a, &b, Exec::Sequential).unwrap();
            for &exec in Exec::available() {
                prop_assert_eq!(&matmul_with(&a, &b, exec).unwrap(), &reference);
                prop_assert_eq!(softmax_rows_with(&reference, exec).unwrap(), softmax_rows_with(&reference, Exec::Sequential).unwrap());
            }
        }
    }
}
