#![allow(dead_code)]

use attnsketch::features::build_feature_row;
use attnsketch::sketch::ColumnSketch;
use attnsketch::{DenseMatrix, FeatureConfig, RecoverySketch};

/// Row-major `rows × cols` buffer from a closure.
pub fn dense(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    (0..rows * cols).map(|x| f(x / cols, x % cols)).collect()
}

/// Feature matrix with one row per input row.
pub fn features(x: &DenseMatrix, cfg: &FeatureConfig) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| build_feature_row(r, cfg).unwrap().into_vec()).collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

/// Dense `m2 × n` matrix of a column sketch.
pub fn materialize_psi(s: &impl ColumnSketch) -> DenseMatrix {
    let cols: Vec<Vec<f64>> = (0..s.ambient()).map(|i| s.sketch_column(i).unwrap()).collect();
    DenseMatrix::from_fn(s.rows(), s.ambient(), |r, c| cols[c][r]).unwrap()
}

/// Dense `m1 × n` matrix of a recovery sketch.
pub fn materialize_phi(rs: &RecoverySketch) -> DenseMatrix {
    let mut data = vec![0.0; rs.m1() * rs.n()];
    for i in 0..rs.n() {
        for (cell, sign) in rs.cells(i).unwrap() {
            data[cell * rs.n() + i] += sign;
        }
    }
    DenseMatrix::from_vec(rs.m1(), rs.n(), data).unwrap()
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute difference when `b` is zero.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if base == 0.0 {
        diff
    } else {
        diff / base
    }
}

/// Independent triple-loop attention: `Σ_l exp(q_j·k_l/d) V_lc / Σ_l exp(q_j·k_l/d)`.
pub fn attention_triple_loop(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Vec<f64> {
    let (n, d) = (q.rows(), q.cols());
    let mut out = vec![0.0; n * d];
    for j in 0..n {
        let mut denom = 0.0;
        let mut num = vec![0.0; d];
        for l in 0..n {
            let mut s = 0.0;
            for c in 0..d {
                s += q.get(j, c) * k.get(l, c);
            }
            let w = (s / d as f64).exp();
            denom += w;
            for (c, acc) in num.iter_mut().enumerate() {
                *acc += w * v.get(l, c);
            }
        }
        for (o, acc) in out[j * d..(j + 1) * d].iter_mut().zip(&num) {
            *o = acc / denom;
        }
    }
    out
}
