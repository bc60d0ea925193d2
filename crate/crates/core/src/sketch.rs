//! Dimension-reduction sketches `Ψ ∈ R^{m2×n}` with column-on-demand access.
//!
//! Neither sketcher ever materializes `Ψ`: the AMS sketcher stores `m2`
//! four-wise independent hashes and the Gaussian sketcher regenerates each
//! column from a counter-based stream keyed by `(seed, column)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::HashFamily4;
use crate::tensor::RngSeed;

/// Default constant `C` in `m2 = ⌈C · ε⁻² · ln(count/δ)⌉`.
pub const JL_CONSTANT: f64 = 8.0;

pub fn jl_dim(eps2: f64, delta: f64, union_count: u64) -> usize {
    jl_dim_with(JL_CONSTANT, eps2, delta, union_count)
}

pub fn jl_dim_with(constant: f64, eps2: f64, delta: f64, union_count: u64) -> usize {
    let m = constant / (eps2 * eps2) * (union_count.max(1) as f64 / delta).ln();
    (m.ceil() as usize).max(1)
}

/// Read access to the columns of an implicit `m2 × n` sketch matrix.
pub trait ColumnSketch {
    /// Number of rows `m2`.
    fn rows(&self) -> usize;

    /// Number of columns `n`.
    fn ambient(&self) -> usize;

    /// Writes column `i` into `out` (length `m2`).
    fn fill_column(&self, i: usize, out: &mut [f64]) -> Result<()>;

    /// Words of state needed to regenerate every column.
    fn seed_words(&self) -> usize;

    fn sketch_column(&self, i: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows()];
        self.fill_column(i, &mut out)?;
        Ok(out)
    }

    fn check(&self, i: usize, out: &[f64]) -> Result<()> {
        if i >= self.ambient() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.ambient(),
            });
        }
        if out.len() != self.rows() {
            return Err(Error::DimensionMismatch {
                what: "sketch column length",
                expected: self.rows(),
                found: out.len(),
            });
        }
        Ok(())
    }
}

/// AMS sketch: `Ψ_{r,i} = ±1/√m2` with the sign from the `r`-th 4-wise hash.
#[derive(Clone, Debug, PartialEq)]
pub struct AmsSketcher {
    n: usize,
    hashes: Vec<HashFamily4>,
    scale: f64,
}

impl AmsSketcher {
    pub fn new(m2: usize, n: usize, seed: RngSeed) -> Self {
        let mut rng = seed.rng();
        AmsSketcher {
            n,
            hashes: (0..m2).map(|_| HashFamily4::random(&mut rng)).collect(),
            scale: 1.0 / (m2 as f64).sqrt(),
        }
    }
}

impl ColumnSketch for AmsSketcher {
    fn rows(&self) -> usize {
        self.hashes.len()
    }

    fn ambient(&self) -> usize {
        self.n
    }

    fn fill_column(&self, i: usize, out: &mut [f64]) -> Result<()> {
        self.check(i, out)?;
        for (o, h) in out.iter_mut().zip(&self.hashes) {
            *o = h.sign(i as u64) * self.scale;
        }
        Ok(())
    }

    fn seed_words(&self) -> usize {
        4 * self.hashes.len()
    }
}

/// Gaussian sketch with `N(0, 1/m2)` entries; column `i` is stream `i` of a
/// ChaCha generator keyed by the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSketcher {
    m2: usize,
    n: usize,
    seed: RngSeed,
}

impl GaussianSketcher {
    pub fn new(m2: usize, n: usize, seed: RngSeed) -> Self {
        GaussianSketcher { m2, n, seed }
    }
}

impl ColumnSketch for GaussianSketcher {
    fn rows(&self) -> usize {
        self.m2
    }

    fn ambient(&self) -> usize {
        self.n
    }

    fn fill_column(&self, i: usize, out: &mut [f64]) -> Result<()> {
        self.check(i, out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.0);
        rng.set_stream(i as u64);
        let sd = 1.0 / (self.m2 as f64).sqrt();
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o = z * sd;
        }
        Ok(())
    }

    fn seed_words(&self) -> usize {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchKind {
    Ams,
    Gaussian,
}

impl std::fmt::Display for SketchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SketchKind::Ams => "ams",
            SketchKind::Gaussian => "gaussian",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sketcher {
    Ams(AmsSketcher),
    Gaussian(GaussianSketcher),
}

impl Sketcher {
    pub fn new(kind: SketchKind, m2: usize, n: usize, seed: RngSeed) -> Self {
        match kind {
            SketchKind::Ams => Sketcher::Ams(AmsSketcher::new(m2, n, seed)),
            SketchKind::Gaussian => Sketcher::Gaussian(GaussianSketcher::new(m2, n, seed)),
        }
    }

    pub fn kind(&self) -> SketchKind {
        match self {
            Sketcher::Ams(_) => SketchKind::Ams,
            Sketcher::Gaussian(_) => SketchKind::Gaussian,
        }
    }
}

impl ColumnSketch for Sketcher {
    fn rows(&self) -> usize {
        match self {
            Sketcher::Ams(s) => s.rows(),
            Sketcher::Gaussian(s) => s.rows(),
        }
    }

    fn ambient(&self) -> usize {
        match self {
            Sketcher::Ams(s) => s.ambient(),
            Sketcher::Gaussian(s) => s.ambient(),
        }
    }

    fn fill_column(&self, i: usize, out: &mut [f64]) -> Result<()> {
        match self {
            Sketcher::Ams(s) => s.fill_column(i, out),
            Sketcher::Gaussian(s) => s.fill_column(i, out),
        }
    }

    fn seed_words(&self) -> usize {
        match self {
            Sketcher::Ams(s) => s.seed_words(),
            Sketcher::Gaussian(s) => s.seed_words(),
        }
    }
}

/// Applies `Ψ` to a vector by streaming over its coordinates.
pub fn sketch_vector(s: &impl ColumnSketch, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != s.ambient() {
        return Err(Error::DimensionMismatch {
            what: "sketched vector length",
            expected: s.ambient(),
            found: x.len(),
        });
    }
    let mut out = vec![0.0; s.rows()];
    let mut col = vec![0.0; s.rows()];
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            s.fill_column(i, &mut col)?;
            for (o, c) in out.iter_mut().zip(&col) {
                *o += c * xi;
            }
        }
    }
    Ok(out)
}

/// Row-major `m2 × width` buffer holding `Σ_i Ψe_i ⊗ r_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchAccumulator {
    rows: usize,
    width: usize,
    buffer: Vec<f64>,
}

impl SketchAccumulator {
    pub fn new(rows: usize, width: usize) -> Self {
        SketchAccumulator {
            rows,
            width,
            buffer: vec![0.0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.buffer[r * self.width..(r + 1) * self.width]
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::DimensionMismatch {
                what: "accumulator row width",
                expected: self.width,
                found: row.len(),
            });
        }
        Ok(())
    }

    fn check_sketch(&self, s: &impl ColumnSketch) -> Result<()> {
        if s.rows() != self.rows {
            return Err(Error::DimensionMismatch {
                what: "sketch rows",
                expected: self.rows,
                found: s.rows(),
            });
        }
        Ok(())
    }

    /// `buffer += (Ψ e_i) ⊗ row`.
    pub fn accumulate_rank_one(&mut self, s: &impl ColumnSketch, i: usize, row: &[f64]) -> Result<()> {
        self.check_row(row)?;
        self.check_sketch(s)?;
        let col = s.sketch_column(i)?;
        self.add_outer(&col, row);
        Ok(())
    }

    /// Same as [`accumulate_rank_one`](Self::accumulate_rank_one) with the
    /// sketch column already generated.
    pub fn add_outer(&mut self, column: &[f64], row: &[f64]) {
        debug_assert_eq!(column.len(), self.rows);
        for (&c, dst) in column.iter().zip(self.buffer.chunks_exact_mut(self.width.max(1))) {
            if c != 0.0 {
                for (d, &r) in dst.iter_mut().zip(row) {
                    *d += c * r;
                }
            }
        }
    }

    /// Sum of `b` rank-one updates in one product: `psi_cols` holds the `b`
    /// sketch columns back to back (`b × m2`) and `rows` the matching
    /// `b × width` update rows.
    pub fn add_block(&mut self, psi_cols: &[f64], rows: &[f64], b: usize) -> Result<()> {
        if psi_cols.len() != self.rows * b || rows.len() != b * self.width {
            return Err(Error::DimensionMismatch {
                what: "block update size",
                expected: self.rows * b,
                found: psi_cols.len(),
            });
        }
        crate::linalg::gemm_acc_at(b, self.rows, self.width, psi_cols, rows, &mut self.buffer);
        Ok(())
    }

    pub fn numbers(&self) -> usize {
        self.buffer.len()
    }
}
