//! Seeded synthetic attention instances.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spectral_norm_upper, DenseMatrix, ProblemParams, RngSeed};

/// Query amplitude of the non-planted rows in the spiky profile, relative to `B`.
pub const SPIKY_BACKGROUND: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `Q`, `K` iid uniform on `[−B, B]`; `V` iid uniform on `[−1, 1]`.
    Uniform,
    /// `K` iid uniform on `[−B, B]`; `V = K_c G⁻¹` with `K_c` the
    /// column-centred keys and `G = K_cᵀK_c/n`, so query direction `e_c`
    /// moves only output column `c` to first order. `Q` is low-amplitude
    /// noise except for `k` planted rows per output column `c`, each equal to
    /// `±B·e_c`, so every output column has `k` dominant entries.
    Spiky,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Uniform => "uniform",
            Profile::Spiky => "spiky",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Profile::Uniform),
            "spiky" => Ok(Profile::Spiky),
            other => Err(Error::InvalidParam(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Result<DenseMatrix> {
    DenseMatrix::from_fn(rows, cols, |_, _| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
}

/// Rescales `v` so that its spectral-norm estimate equals `1/√n`.
pub fn normalize_values(v: &DenseMatrix) -> Result<DenseMatrix> {
    let norm = spectral_norm_upper(v);
    if norm == 0.0 {
        return Ok(v.clone());
    }
    v.scaled(1.0 / ((v.rows() as f64).sqrt() * norm))
}

/// True when `spectral_norm_upper(v) ≤ (1 + 1e-6)/√n`.
pub fn values_within_bound(v: &DenseMatrix) -> bool {
    spectral_norm_upper(v) <= (1.0 + 1e-6) / (v.rows() as f64).sqrt()
}

pub fn gen_instance(p: &ProblemParams, seed: RngSeed, profile: Profile) -> Result<Instance> {
    p.validate()?;
    let (n, d, b) = (p.n, p.d, p.b);
    let mut rng = seed.rng();
    let k = uniform(&mut rng, n, d, b)?;
    let (q, v) = match profile {
        Profile::Uniform => {
            let q = uniform(&mut rng, n, d, b)?;
            let v = uniform(&mut rng, n, d, 1.0)?;
            (q, v)
        }
        Profile::Spiky => {
            let v = dual_keys(&k)?;
            let mut q = uniform(&mut rng, n, d, SPIKY_BACKGROUND * b)?.data().to_vec();
            let planted = (d * p.k).min(n);
            for (slot, row) in sample(&mut rng, n, planted).into_iter().enumerate() {
                let col = slot / p.k;
                let sign = if rng.random::<bool>() { b } else { -b };
                let target = &mut q[row * d..(row + 1) * d];
                target.iter_mut().for_each(|x| *x = 0.0);
                target[col] = sign;
            }
            (DenseMatrix::from_vec(n, d, q)?, v)
        }
    };
    Ok(Instance {
        q,
        k,
        v: normalize_values(&v)?,
    })
}

/// `K_c G⁻¹` for centred keys `K_c` and `G = K_cᵀK_c / n`. Falls back to
/// `K_c` when `G` is singular.
fn dual_keys(k: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, d) = (k.rows(), k.cols());
    let means: Vec<f64> = (0..d).map(|c| k.column(c).iter().sum::<f64>() / n as f64).collect();
    let centred = DenseMatrix::from_fn(n, d, |r, c| k.get(r, c) - means[c])?;
    let gram = centred.transpose().matmul(&centred)?.scaled(1.0 / n as f64)?;
    match invert_small(&gram) {
        Some(inv) => centred.matmul(&inv),
        None => Ok(centred),
    }
}

/// Gauss-Jordan inverse with partial pivoting for a small square matrix.
fn invert_small(m: &DenseMatrix) -> Option<DenseMatrix> {
    let d = m.rows();
    let scale = m.max_abs();
    let mut a: Vec<f64> = m.data().to_vec();
    let mut inv: Vec<f64> = DenseMatrix::identity(d).data().to_vec();
    for col in 0..d {
        let pivot = (col..d).max_by(|&x, &y| a[x * d + col].abs().total_cmp(&a[y * d + col].abs()))?;
        if a[pivot * d + col].abs() <= 1e-12 * scale {
            return None;
        }
        for j in 0..d {
            a.swap(col * d + j, pivot * d + j);
            inv.swap(col * d + j, pivot * d + j);
        }
        let p = a[col * d + col];
        for j in 0..d {
            a[col * d + j] /= p;
            inv[col * d + j] /= p;
        }
        for r in (0..d).filter(|&r| r != col) {
            let f = a[r * d + col];
            if f != 0.0 {
                for j in 0..d {
                    a[r * d + j] -= f * a[col * d + j];
                    inv[r * d + j] -= f * inv[col * d + j];
                }
            }
        }
    }
    DenseMatrix::from_vec(d, d, inv).ok()
}
