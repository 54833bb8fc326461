//! Numeric kernels: a dense row-major `f32` matrix and the five operations
//! the engine is built from — matmul, row softmax, rotary position
//! application, RMS normalization, and seeded Gaussian initialization.
//!
//! Everything here is deterministic: identical inputs (and an identical RNG
//! call sequence) produce bit-identical outputs on every run. The tests at
//! the bottom pin each kernel against an independent 64-bit reference.

use crate::error::{Error, Result};

/// Frequency base for rotary angles.
const ROPE_BASE: f64 = 10_000.0;
/// Stabilizer under the root in [`rmsnorm`].
const RMSNORM_EPS: f32 = 1e-6;

// ── Matrix ───────────────────────────────────────────────────────────────

/// Dense row-major `f32` matrix. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Wraps an existing row-major buffer. Panics if the length is wrong;
    /// that is a programming error, not an input condition.
    #[must_use]
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must be rows*cols");
        Self { rows, cols, data }
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    #[must_use]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[must_use]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[must_use]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Stacks `self` on top of `other`; column counts must match.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_vec(self.rows + other.rows, self.cols, data))
    }
}

// ── Kernels ──────────────────────────────────────────────────────────────

/// `a · b`. Inner dimensions must agree; the error names both shapes.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order: the inner loop walks both `b` and `out` contiguously.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction, so magnitudes up to ~1e4 stay
/// finite. `-inf` entries are allowed and get exactly zero weight (this is
/// how attention masking rides on the same kernel); a row must keep at least
/// one finite entry.
#[must_use]
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        debug_assert!(max > f32::NEG_INFINITY, "softmax row {r} is fully masked");
        let orow = out.row_mut(r);
        let mut sum = 0.0f32;
        for (o, &x) in orow.iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Rotates each row by its position's angle set. Rows pair column `j` with
/// column `j + cols/2`; position 0 is the identity rotation. The column
/// count must be even and `positions` must cover every row.
pub fn rope_apply(m: &Matrix, positions: &[usize]) -> Result<Matrix> {
    if !m.cols.is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "rotary application needs an even column count, got {}",
            m.cols
        )));
    }
    if positions.len() != m.rows {
        return Err(Error::Precondition(format!(
            "rotary application needs one position per row: {} positions for {} rows",
            positions.len(),
            m.rows
        )));
    }
    let half = m.cols / 2;
    let mut out = Matrix::zeros(m.rows, m.cols);
    for (r, &position) in positions.iter().enumerate() {
        let pos = position as f64;
        let row = m.row(r);
        let orow = out.row_mut(r);
        for j in 0..half {
            let theta = pos * ROPE_BASE.powf(-2.0 * j as f64 / m.cols as f64);
            let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
            let (x1, x2) = (row[j], row[j + half]);
            orow[j] = x1 * cos + x2 * sin;
            orow[j + half] = -x1 * sin + x2 * cos;
        }
    }
    Ok(out)
}

/// RMS normalization with a learned per-column gain:
/// `y[i][j] = x[i][j] * gain[j] / sqrt(mean_j(x[i][j]^2) + 1e-6)`.
pub fn rmsnorm(x: &Matrix, gain: &[f32]) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::Precondition(format!(
            "rmsnorm gain length {} does not match column count {}",
            gain.len(),
            x.cols
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / x.cols as f32;
        let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
        for (o, (&v, &g)) in out.row_mut(r).iter_mut().zip(row.iter().zip(gain)) {
            *o = v * inv * g;
        }
    }
    Ok(out)
}

// ── Seeded RNG ───────────────────────────────────────────────────────────

/// SplitMix64 stream with a Box–Muller Gaussian on top. Self-contained so
/// that committed golden digests cannot drift with dependency versions.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    #[must_use]
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..n`. `n` must be nonzero.
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize
    }

    /// Standard normal via Box–Muller (cosine branch only, so one draw
    /// consumes exactly two `u64`s — easy to reason about for determinism).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Matrix of i.i.d. `N(0, std^2)` draws, row-major fill order.
    #[must_use]
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = self.normal() as f32 * std;
        }
        m
    }

    /// `k` distinct indices below `n`, ascending. Panics if `k > n`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct indices below {n}");
        // Floyd's algorithm keeps the draw count at exactly k.
        let mut chosen = std::collections::BTreeSet::new();
        for j in n - k..n {
            let t = self.next_below(j + 1);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().collect()
    }
}

// ── Tests ────────────────────────────────────────────────────────────────
