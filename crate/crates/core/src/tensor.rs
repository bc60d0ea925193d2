//! Dense row-major matrices, seeded randomness and problem parameters.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f64` matrix. Every entry is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
                offset: pos * 8,
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "row length",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Multiplies every entry by `s`. Fails if the result overflows.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                what: "inner matmul dimension",
                expected: self.cols,
                found: rhs.rows,
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (l, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    for (d, &b) in dst.iter_mut().zip(rhs.row(l)) {
                        *d += a * b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `x^T M` for a row vector `x`, accumulated in index order.
    pub fn row_times(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                what: "row vector length",
                expected: self.rows,
                found: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                acc += xj * self.get(j, c);
            }
            *o = acc;
        }
        Ok(out)
    }
}

/// Upper estimate of the spectral norm.
///
/// Power iteration on the Gram matrix of the smaller side (`MᵀM` or `MMᵀ`),
/// see [`spectral_norm_upper_from_gram`]. Never below the largest column
/// norm.
pub fn spectral_norm_upper(m: &DenseMatrix) -> f64 {
    let max_col = (0..m.cols)
        .map(|c| m.column(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    if m.rows == 0 || m.cols == 0 || max_col == 0.0 {
        return 0.0;
    }
    let gram = if m.cols <= m.rows {
        m.transpose().matmul(m)
    } else {
        m.matmul(&m.transpose())
    }
    .expect("conformable");
    spectral_norm_upper_from_gram(&gram).max(max_col)
}

/// Spectral-norm estimate of any `M` with `MᵀM = gram`.
///
/// Power iteration from the normalized all-ones vector. Each of the 30 steps
/// squares the current power of `gram`, so the start vector is multiplied by
/// `gram^(2^30)` and close leading singular values still separate. The
/// square root of the Rayleigh quotient is inflated by `1 + 1e-6`.
pub fn spectral_norm_upper_from_gram(gram: &DenseMatrix) -> f64 {
    const STEPS: usize = 30;
    const SAFETY: f64 = 1.0 + 1e-6;

    let g = gram.rows;
    let max_diag = (0..g).map(|i| gram.get(i, i)).fold(0.0_f64, f64::max);
    if g == 0 || max_diag <= 0.0 {
        return 0.0;
    }
    let mut power = gram.clone();
    for _ in 0..STEPS {
        let sq = power.matmul(&power).expect("square");
        let scale = sq.max_abs();
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        power = DenseMatrix {
            rows: g,
            cols: g,
            data: sq.data.iter().map(|x| x / scale).collect(),
        };
    }
    let start = 1.0 / (g as f64).sqrt();
    let mut v: Vec<f64> = power.iter_rows().map(|row| row.iter().sum::<f64>() * start).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rayleigh = if norm == 0.0 {
        0.0
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
        gram.iter_rows()
            .zip(&v)
            .map(|(row, vi)| vi * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    rayleigh.max(max_diag).sqrt() * SAFETY
}

/// Seed from which every randomized construction is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for the given stream tag.
    pub fn derive(self, stream: u64) -> RngSeed {
        let mut rng = self.rng();
        rng.set_stream(stream.wrapping_add(1));
        RngSeed(rng.next_u64())
    }
}

/// Size and accuracy parameters of one attention instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub n: usize,
    pub d: usize,
    /// Entry bound on `Q` and `K`.
    pub b: f64,
    pub k: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub delta: f64,
}

impl ProblemParams {
    pub fn new(n: usize, d: usize, b: f64, k: usize, eps1: f64, eps2: f64, delta: f64) -> Result<Self> {
        let p = ProblemParams {
            n,
            d,
            b,
            k,
            eps1,
            eps2,
            delta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidParam(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        if self.n == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::InvalidParam(format!(
                "n, d and k must be positive (n = {}, d = {}, k = {})",
                self.n, self.d, self.k
            )));
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::InvalidParam(format!("entry bound B must be finite and non-negative, got {}", self.b)));
        }
        unit("eps1", self.eps1)?;
        unit("eps2", self.eps2)?;
        unit("delta", self.delta)
    }
}
