//! Exact attention by direct `n × n` evaluation.

use crate::error::{Error, Result};
use crate::features::{taylor_exp, FeatureConfig};
use crate::sketch::ColumnSketch;
use crate::tensor::DenseMatrix;

/// Largest `n` the oracle will materialize.
pub const ORACLE_MAX_N: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    /// `D⁻¹AV` with `A = exp(QKᵀ/d)`.
    pub y: DenseMatrix,
    /// `D̃⁻¹ÃV` with `Ã` the truncated-Taylor kernel.
    pub y_tilde: DenseMatrix,
    pub d_diag: Vec<f64>,
    pub d_tilde_diag: Vec<f64>,
    /// `max_{j,l} |A_{jl} − Ã_{jl}|`.
    pub kernel_max_error: f64,
    /// `max_j |Σ_l (D⁻¹A)_{jl} − 1|`.
    pub row_sum_error: f64,
    /// `max_j |Σ_l (D̃⁻¹Ã)_{jl} − 1|`.
    pub row_sum_error_tilde: f64,
}

fn check_shapes(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<(usize, usize)> {
    let (n, d) = (q.rows(), q.cols());
    for (what, m) in [("K shape", k), ("V shape", v)] {
        if m.rows() != n {
            return Err(Error::DimensionMismatch { what, expected: n, found: m.rows() });
        }
        if m.cols() != d {
            return Err(Error::DimensionMismatch { what, expected: d, found: m.cols() });
        }
    }
    if n > ORACLE_MAX_N {
        return Err(Error::OracleTooLarge { n, limit: ORACLE_MAX_N });
    }
    Ok((n, d))
}

/// Scaled scores `q_jᵀk_l / d` for one query row.
fn scores(q_row: &[f64], k: &DenseMatrix, out: &mut [f64]) {
    let d = q_row.len() as f64;
    for (s, k_row) in out.iter_mut().zip(k.iter_rows()) {
        *s = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>() / d;
    }
}

/// Weighted average `Σ_l w_l V_l / Σ_l w_l`, returning the normalizer too.
fn normalized_mix(weights: &[f64], v: &DenseMatrix, out: &mut [f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&w, v_row) in weights.iter().zip(v.iter_rows()) {
        for (o, &x) in out.iter_mut().zip(v_row) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    total
}

/// Exact attention output and its Taylor-kernel counterpart.
pub fn exact_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    features: &FeatureConfig,
) -> Result<OracleResult> {
    let (n, d) = check_shapes(q, k, v)?;
    if features.d() != d {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: d,
            found: features.d(),
        });
    }
    let g = features.degree();
    let mut y = vec![0.0; n * d];
    let mut y_tilde = vec![0.0; n * d];
    let mut d_diag = Vec::with_capacity(n);
    let mut d_tilde_diag = Vec::with_capacity(n);
    let mut s = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut a_tilde = vec![0.0; n];
    let (mut kernel_max_error, mut row_sum_error, mut row_sum_error_tilde) = (0.0f64, 0.0f64, 0.0f64);

    for (j, q_row) in q.iter_rows().enumerate() {
        scores(q_row, k, &mut s);
        for l in 0..n {
            a[l] = s[l].exp();
            a_tilde[l] = taylor_exp(s[l], g);
            kernel_max_error = kernel_max_error.max((a[l] - a_tilde[l]).abs());
        }
        let dj = normalized_mix(&a, v, &mut y[j * d..(j + 1) * d]);
        let dtj = normalized_mix(&a_tilde, v, &mut y_tilde[j * d..(j + 1) * d]);
        row_sum_error = row_sum_error.max((a.iter().map(|x| x / dj).sum::<f64>() - 1.0).abs());
        row_sum_error_tilde = row_sum_error_tilde.max((a_tilde.iter().map(|x| x / dtj).sum::<f64>() - 1.0).abs());
        d_diag.push(dj);
        d_tilde_diag.push(dtj);
    }

    Ok(OracleResult {
        y: DenseMatrix::from_vec(n, d, y)?,
        y_tilde: DenseMatrix::from_vec(n, d, y_tilde)?,
        d_diag,
        d_tilde_diag,
        kernel_max_error,
        row_sum_error,
        row_sum_error_tilde,
    })
}

/// `ŷ = D̃⁻¹ÃΨᵀΨV` with `Ψ` materialized column by column.
pub fn sketched_output(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    features: &FeatureConfig,
    psi: &impl ColumnSketch,
) -> Result<DenseMatrix> {
    let (n, d) = check_shapes(q, k, v)?;
    if psi.ambient() != n {
        return Err(Error::DimensionMismatch {
            what: "sketch ambient dimension",
            expected: n,
            found: psi.ambient(),
        });
    }
    let m2 = psi.rows();
    let columns: Vec<Vec<f64>> = (0..n).map(|l| psi.sketch_column(l)).collect::<Result<_>>()?;
    // ΨV
    let mut sv = vec![0.0; m2 * d];
    for (col, v_row) in columns.iter().zip(v.iter_rows()) {
        for (r, &p) in col.iter().enumerate() {
            for (c, &x) in v_row.iter().enumerate() {
                sv[r * d + c] += p * x;
            }
        }
    }
    // ΨᵀΨV
    let mut proj = vec![0.0; n * d];
    for (l, col) in columns.iter().enumerate() {
        for (r, &p) in col.iter().enumerate() {
            for c in 0..d {
                proj[l * d + c] += p * sv[r * d + c];
            }
        }
    }
    let proj = DenseMatrix::from_vec(n, d, proj)?;
    let mut out = vec![0.0; n * d];
    let mut s = vec![0.0; n];
    for (j, q_row) in q.iter_rows().enumerate() {
        scores(q_row, k, &mut s);
        s.iter_mut().for_each(|x| *x = taylor_exp(*x, features.degree()));
        normalized_mix(&s, &proj, &mut out[j * d..(j + 1) * d]);
    }
    DenseMatrix::from_vec(n, d, out)
}
