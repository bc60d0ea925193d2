//! Error and memory reports.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{AttentionOutput, BufferRole, SketchState};
use crate::error::{Error, Result};
use crate::oracle::OracleResult;
use crate::recovery::{tail_norm, SparseColumn};
use crate::tensor::{DenseMatrix, ProblemParams};

fn norm(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum::<f64>().sqrt()
}

fn column_gap(a: &DenseMatrix, b: &DenseMatrix, c: usize) -> f64 {
    norm((0..a.rows()).map(|r| a.get(r, c) - b.get(r, c)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub column: usize,
    /// `‖T_c − y_c‖₂`.
    pub error: f64,
    pub y_norm: f64,
    /// `ℓ2` norm of `y_c` without its `k` largest-magnitude entries.
    pub tail_k: f64,
    /// `(1 + ε1)·tail_k + ε2`.
    pub bound: f64,
    /// `error / bound`.
    pub ratio: f64,
    pub pass: bool,
    pub nnz: usize,
    /// `‖y_c − ỹ_c‖₂`.
    pub kernel_gap: f64,
    /// `‖ỹ_c − ŷ_c‖₂`, present when `ŷ` was supplied.
    pub sketch_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub n: usize,
    pub k: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub columns: Vec<ColumnReport>,
    pub pass_rate: f64,
    pub max_ratio: f64,
    pub max_nnz: usize,
    /// Every column has at most `2k` nonzeros.
    pub sparsity_ok: bool,
}

impl ErrorReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4} {:>12} {:>12} {:>12} {:>12} {:>8} {:>5} {:>5}",
            "col", "error", "tail_k", "bound", "kernel_gap", "ratio", "nnz", "pass"
        );
        for c in &self.columns {
            let _ = writeln!(
                s,
                "{:>4} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.4} {:>5} {:>5}",
                c.column, c.error, c.tail_k, c.bound, c.kernel_gap, c.ratio, c.nnz, c.pass
            );
        }
        let _ = writeln!(
            s,
            "pass rate {:.4}, max ratio {:.4}, max nnz {} (limit {})",
            self.pass_rate,
            self.max_ratio,
            self.max_nnz,
            2 * self.k
        );
        s
    }
}

pub fn evaluate(output: &AttentionOutput, oracle: &OracleResult, p: &ProblemParams) -> Result<ErrorReport> {
    evaluate_with(output, oracle, p, None)
}

/// Like [`evaluate`], also reporting `‖ỹ_c − ŷ_c‖₂` when `y_hat` is given.
pub fn evaluate_with(
    output: &AttentionOutput,
    oracle: &OracleResult,
    p: &ProblemParams,
    y_hat: Option<&DenseMatrix>,
) -> Result<ErrorReport> {
    let (n, d) = (oracle.y.rows(), oracle.y.cols());
    if output.n != n {
        return Err(Error::DimensionMismatch { what: "output length", expected: n, found: output.n });
    }
    if output.columns.len() != d {
        return Err(Error::DimensionMismatch {
            what: "output column count",
            expected: d,
            found: output.columns.len(),
        });
    }
    if let Some(h) = y_hat {
        if h.rows() != n || h.cols() != d {
            return Err(Error::DimensionMismatch { what: "y_hat rows", expected: n, found: h.rows() });
        }
    }
    let columns: Vec<ColumnReport> = output
        .columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            let y = oracle.y.column(c);
            let error = col.distance_to(&y);
            let tail_k = tail_norm(&y, p.k);
            let bound = (1.0 + p.eps1) * tail_k + p.eps2;
            ColumnReport {
                column: c,
                error,
                y_norm: norm(y.iter().copied()),
                tail_k,
                bound,
                ratio: error / bound,
                pass: error <= bound,
                nnz: col.nnz(),
                kernel_gap: column_gap(&oracle.y, &oracle.y_tilde, c),
                sketch_gap: y_hat.map(|h| column_gap(&oracle.y_tilde, h, c)),
            }
        })
        .collect();
    let passed = columns.iter().filter(|c| c.pass).count();
    let max_nnz = columns.iter().map(|c| c.nnz).max().unwrap_or(0);
    Ok(ErrorReport {
        n,
        k: p.k,
        eps1: p.eps1,
        eps2: p.eps2,
        pass_rate: passed as f64 / columns.len().max(1) as f64,
        max_ratio: columns.iter().map(|c| c.ratio).fold(0.0, f64::max),
        max_nnz,
        sparsity_ok: max_nnz <= 2 * p.k,
        columns,
    })
}

/// Upper bound on `max_c ‖y_c − ỹ_c‖₂` from an entrywise kernel bound.
///
/// With `|A_{jl} − Ã_{jl}| ≤ κ`, row `j` of the two softmax matrices differs by
/// at most `2nκ / D_{j,j}` in `ℓ1`, so each output entry moves by at most that
/// times `max |V|`, and a column by `√n` times the worst entry.
pub fn kernel_gap_bound(d_diag: &[f64], v: &DenseMatrix, entry_bound: f64) -> f64 {
    let n = d_diag.len() as f64;
    let d_min = d_diag.iter().copied().fold(f64::INFINITY, f64::min);
    n.sqrt() * 2.0 * n * entry_bound / d_min * v.max_abs()
}

/// Writes the nonzeros of `T` as `col index value` lines, column by column.
pub fn write_sparse_text(out: &AttentionOutput, w: &mut impl Write) -> std::io::Result<()> {
    for (c, col) in out.columns.iter().enumerate() {
        for &(i, v) in col.entries() {
            writeln!(w, "{c} {i} {v:e}")?;
        }
    }
    Ok(())
}

/// Reads the format of [`write_sparse_text`] back into `d` columns of length `n`.
pub fn read_sparse_text(r: impl BufRead, n: usize, d: usize) -> Result<AttentionOutput> {
    let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<sparse output>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected `col index value`, got {line:?}", lineno + 1));
        let mut parts = line.split_whitespace();
        let (Some(c), Some(i), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let c: usize = c.parse().map_err(|_| bad())?;
        let i: usize = i.parse().map_err(|_| bad())?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        if c >= d {
            return Err(Error::IndexOutOfRange { index: c, len: d });
        }
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if !v.is_finite() {
            return Err(bad());
        }
        entries[c].push((i, v));
    }
    let columns = entries.into_iter().map(SparseColumn::from_entries).collect::<Result<Vec<_>>>()?;
    Ok(AttentionOutput { n, columns, diagnostics: Vec::new() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: BufferRole,
    pub numbers: usize,
    pub bytes: usize,
}

/// Per-object accounting; contains nothing that depends on `n` unless the
/// engine does.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub m1: usize,
    pub m2: usize,
    pub t: usize,
    pub d: usize,
    pub entries: Vec<MemoryEntry>,
    /// `m2·t + m2·d + m1·t + t`, plus `3d²` in cross mode.
    pub sketch_numbers: usize,
    /// Fixed-size staging and scratch buffers.
    pub working_numbers: usize,
    /// Hash coefficients and seeds for `Ψ` and `Φ`.
    pub hash_seed_words: usize,
    pub total_numbers: usize,
    pub total_bytes: usize,
    /// Largest single dimension of any buffer.
    pub largest_dimension: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n: usize,
    pub breakdown: MemoryBreakdown,
}

/// `m2·t + m2·d + m1·t + t`.
pub fn core_numbers(m1: usize, m2: usize, t: usize, d: usize) -> usize {
    m2 * t + m2 * d + m1 * t + t
}

pub fn memory_audit(st: &SketchState) -> MemoryReport {
    let dims = st.dims();
    let entries: Vec<MemoryEntry> = st
        .buffer_shapes()
        .into_iter()
        .map(|b| MemoryEntry {
            bytes: b.numbers * std::mem::size_of::<f64>(),
            name: b.name,
            rows: b.rows,
            cols: b.cols,
            role: b.role,
            numbers: b.numbers,
        })
        .collect();
    let sum_role = |role| entries.iter().filter(|e| e.role == role).map(|e| e.numbers).sum::<usize>();
    let sketch_numbers = sum_role(BufferRole::Sketch);
    let working_numbers = sum_role(BufferRole::Working);
    let hash_seed_words = st.hash_seed_words();
    let total_numbers = sketch_numbers + working_numbers + hash_seed_words;
    let largest_dimension = entries.iter().flat_map(|e| [e.rows, e.cols]).max().unwrap_or(0);
    MemoryReport {
        n: dims.n,
        breakdown: MemoryBreakdown {
            m1: dims.m1(),
            m2: dims.m2,
            t: dims.t,
            d: dims.d,
            entries,
            sketch_numbers,
            working_numbers,
            hash_seed_words,
            total_numbers,
            total_bytes: total_numbers * 8,
            largest_dimension,
        },
    }
}

impl MemoryReport {
    pub fn table(&self) -> String {
        let b = &self.breakdown;
        let mut s = String::new();
        let _ = writeln!(s, "n = {} (m1 = {}, m2 = {}, t = {}, d = {})", self.n, b.m1, b.m2, b.t, b.d);
        for e in &b.entries {
            let role = match e.role {
                BufferRole::Sketch => "sketch",
                BufferRole::Working => "working",
            };
            let _ = writeln!(s, "  {:<18} {:>7} x {:<7} {:<8} {:>14} numbers", e.name, e.rows, e.cols, role, e.numbers);
        }
        let _ = writeln!(s, "  {:<18} {:>44} words", "hash seeds", b.hash_seed_words);
        let _ = writeln!(s, "  total {} numbers, {} bytes", b.total_numbers, b.total_bytes);
        s
    }
}
