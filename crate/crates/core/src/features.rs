//! Truncated-Taylor tensor features for the exponential kernel.
//!
//! Row `φ(x)` concatenates blocks `x^{⊗j} / (√(j!) · d^{j/2})` for
//! `j = 0..=g`, so `⟨φ(q), φ(k)⟩ = Σ_{j≤g} (qᵀk/d)^j / j!`, the degree-`g`
//! Taylor polynomial of `exp(qᵀk/d)`. The same map serves both the query side
//! (`U1`) and the key side (`U2`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FeatureSpec", into = "FeatureSpec")]
pub struct FeatureConfig {
    d: usize,
    degree: usize,
    width: usize,
}

/// Serialized form of [`FeatureConfig`]; the width is recomputed on load.
#[derive(Serialize, Deserialize)]
struct FeatureSpec {
    d: usize,
    degree: usize,
}

impl TryFrom<FeatureSpec> for FeatureConfig {
    type Error = Error;

    fn try_from(s: FeatureSpec) -> Result<Self> {
        FeatureConfig::new(s.d, s.degree)
    }
}

impl From<FeatureConfig> for FeatureSpec {
    fn from(c: FeatureConfig) -> Self {
        FeatureSpec { d: c.d, degree: c.degree }
    }
}

impl FeatureConfig {
    /// `degree` must be even and at least 2; even truncations of `exp` are
    /// strictly positive, which keeps every `D̃_{i,i}` invertible.
    pub fn new(d: usize, degree: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParam("feature dimension d must be positive".into()));
        }
        if degree < 2 || !degree.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!("Taylor degree must be even and >= 2, got {degree}")));
        }
        let mut width = 0usize;
        let mut block = 1usize;
        for j in 0..=degree {
            width = width
                .checked_add(block)
                .ok_or_else(|| Error::InvalidParam(format!("feature width overflows for d = {d}, g = {degree}")))?;
            if j < degree {
                block = block
                    .checked_mul(d)
                    .ok_or_else(|| Error::InvalidParam(format!("feature width overflows for d = {d}, g = {degree}")))?;
            }
        }
        Ok(FeatureConfig { d, degree, width })
    }

    /// Default degree for an entry bound: 6 up to `B = 1`, 8 up to `B = 2`.
    pub fn default_degree(b: f64) -> Result<usize> {
        if b <= 1.0 {
            Ok(6)
        } else if b <= 2.0 {
            Ok(8)
        } else {
            Err(Error::InvalidParam(format!("no default Taylor degree for B = {b}; pass one explicitly")))
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Feature width `t = Σ_{j=0..=g} d^j`.
    pub fn width(&self) -> usize {
        self.width
    }
}

/// One row of `U1` or `U2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow(Vec<f64>);

impl FeatureRow {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &FeatureRow) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn build_feature_row(x: &[f64], cfg: &FeatureConfig) -> Result<FeatureRow> {
    let mut out = vec![0.0; cfg.width];
    fill_feature_row(x, cfg, &mut out)?;
    Ok(FeatureRow(out))
}

/// Writes `φ(x)` into `out` (length `t`) in `O(t)` time.
pub fn fill_feature_row(x: &[f64], cfg: &FeatureConfig, out: &mut [f64]) -> Result<()> {
    if x.len() != cfg.d {
        return Err(Error::DimensionMismatch {
            what: "feature input dimension",
            expected: cfg.d,
            found: x.len(),
        });
    }
    if out.len() != cfg.width {
        return Err(Error::DimensionMismatch {
            what: "feature row width",
            expected: cfg.width,
            found: out.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("feature input contains a non-finite value".into()));
    }
    let d = cfg.d;
    out[0] = 1.0;
    // block j lives at [start, start + d^j); built from block j-1 as kron(prev, x)
    let mut prev_start = 0;
    let mut prev_len = 1;
    for j in 1..=cfg.degree {
        let scale = 1.0 / ((j * d) as f64).sqrt();
        let start = prev_start + prev_len;
        let (head, tail) = out.split_at_mut(start);
        let prev = &head[prev_start..prev_start + prev_len];
        for (a, chunk) in prev.iter().zip(tail.chunks_exact_mut(d)) {
            let s = a * scale;
            for (c, &xl) in chunk.iter_mut().zip(x) {
                *c = s * xl;
            }
        }
        prev_start = start;
        prev_len *= d;
    }
    Ok(())
}

/// Degree-`g` Taylor polynomial of `exp(s)`, evaluated by Horner's rule.
pub fn taylor_exp(s: f64, degree: usize) -> f64 {
    let mut acc = 1.0;
    for j in (1..=degree).rev() {
        acc = 1.0 + acc * s / j as f64;
    }
    acc
}

/// Entrywise bound on `|exp(qᵀk/d) − ⟨φ(q), φ(k)⟩|` when `‖q‖∞, ‖k‖∞ ≤ B`:
/// the Lagrange remainder `(B²)^{g+1} e^{B²} / (g+1)!`, since `|qᵀk/d| ≤ B²`.
pub fn kernel_error_bound(b: f64, _d: usize, degree: usize) -> f64 {
    let s = b * b;
    let mut term = s.exp();
    for j in 1..=degree + 1 {
        term *= s / j as f64;
    }
    term
}
