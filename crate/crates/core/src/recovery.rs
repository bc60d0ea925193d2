//! Linear sparse-recovery sketch `Φ ∈ R^{m1×n}`.
//!
//! `Φ` stacks `R` repetitions of a `W`-bucket signed hash table. Each
//! coordinate lands in exactly one bucket per repetition, so an update touches
//! `R = O(log n)` cells. Decoding estimates every coordinate by the median of
//! its `R` signed bucket values and keeps the `2k` largest estimates.

use std::cmp::Ordering;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{HashFamily4, PairwiseHash};
use crate::tensor::RngSeed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConstants {
    /// `R = ⌈reps · log2 n⌉`.
    pub reps: f64,
    /// `W = ⌈width · k / ε1⌉`.
    pub width: f64,
}

impl Default for RecoveryConstants {
    fn default() -> Self {
        RecoveryConstants { reps: 4.0, width: 8.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryDims {
    pub reps: usize,
    pub width: usize,
    pub m1: usize,
}

impl RecoveryDims {
    pub fn new(reps: usize, width: usize) -> Self {
        RecoveryDims {
            reps,
            width,
            m1: reps * width,
        }
    }
}

pub fn recovery_dims(k: usize, eps1: f64, n: usize) -> RecoveryDims {
    recovery_dims_with(RecoveryConstants::default(), k, eps1, n)
}

pub fn recovery_dims_with(c: RecoveryConstants, k: usize, eps1: f64, n: usize) -> RecoveryDims {
    let reps = ((c.reps * (n.max(1) as f64).log2()).ceil() as usize).max(1);
    let width = ((c.width * k as f64 / eps1).ceil() as usize).max(1);
    RecoveryDims::new(reps, width)
}

/// Sparse output column: strictly increasing indices, at most `2k` entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseColumn {
    entries: Vec<(usize, f64)>,
}

impl SparseColumn {
    /// Builds a column from arbitrary-order entries; duplicates are rejected.
    pub fn from_entries(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParam("duplicate index in sparse column".into()));
        }
        Ok(SparseColumn { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map_or(0.0, |p| self.entries[p].1)
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    /// `‖self − x‖₂` without densifying `self`.
    pub fn distance_to(&self, x: &[f64]) -> f64 {
        let mut sq: f64 = x.iter().map(|v| v * v).sum();
        for &(i, v) in &self.entries {
            sq += (v - x[i]) * (v - x[i]) - x[i] * x[i];
        }
        sq.max(0.0).sqrt()
    }
}

/// Linear measurement `z = Φx` tagged with the sketch that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    sketch_id: u64,
    z: Vec<f64>,
}

impl Measurement {
    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn sketch_id(&self) -> u64 {
        self.sketch_id
    }

    /// `self += other`; both must come from the same sketch.
    pub fn add_assign(&mut self, other: &Measurement) -> Result<()> {
        if other.sketch_id != self.sketch_id {
            return Err(Error::SketchMismatch {
                expected: self.sketch_id,
                found: other.sketch_id,
            });
        }
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            *a += b;
        }
        Ok(())
    }
}

/// `t` measurements stored as one row-major `m1 × t` matrix, so the update
/// `Φ e_i ⊗ w` touches `R` contiguous rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementBank {
    sketch_id: u64,
    m1: usize,
    width: usize,
    data: Vec<f64>,
}

impl MeasurementBank {
    pub fn m1(&self) -> usize {
        self.m1
    }

    /// Number of measurements in the bank.
    pub fn columns(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numbers(&self) -> usize {
        self.data.len()
    }

    pub fn column(&self, c: usize) -> Measurement {
        Measurement {
            sketch_id: self.sketch_id,
            z: (0..self.m1).map(|r| self.data[r * self.width + c]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoverySketch {
    id: u64,
    n: usize,
    k: usize,
    eps1: f64,
    dims: RecoveryDims,
    bucket_hashes: Vec<PairwiseHash>,
    sign_hashes: Vec<HashFamily4>,
}

impl RecoverySketch {
    pub fn new(k: usize, eps1: f64, n: usize, seed: RngSeed) -> Result<Self> {
        Self::with_dims(k, eps1, n, recovery_dims(k, eps1, n), seed)
    }

    pub fn with_dims(k: usize, eps1: f64, n: usize, dims: RecoveryDims, seed: RngSeed) -> Result<Self> {
        if k == 0 || n == 0 || dims.reps == 0 || dims.width == 0 {
            return Err(Error::InvalidParam(format!(
                "recovery sketch needs positive k, n, reps and width (k = {k}, n = {n}, {dims:?})"
            )));
        }
        if !(eps1 > 0.0 && eps1 <= 1.0) {
            return Err(Error::InvalidParam(format!("eps1 must lie in (0, 1], got {eps1}")));
        }
        let mut rng = seed.rng();
        let bucket_hashes = (0..dims.reps).map(|_| PairwiseHash::random(&mut rng)).collect();
        let sign_hashes = (0..dims.reps).map(|_| HashFamily4::random(&mut rng)).collect();
        let id = rng.next_u64() ^ (n as u64).rotate_left(40) ^ (dims.reps as u64).rotate_left(20) ^ dims.width as u64;
        Ok(RecoverySketch {
            id,
            n,
            k,
            eps1,
            dims: RecoveryDims::new(dims.reps, dims.width),
            bucket_hashes,
            sign_hashes,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    pub fn dims(&self) -> RecoveryDims {
        self.dims
    }

    pub fn m1(&self) -> usize {
        self.dims.m1
    }

    /// Words of hash coefficients held by the sketch.
    pub fn hash_words(&self) -> usize {
        2 * self.bucket_hashes.len() + 4 * self.sign_hashes.len()
    }

    pub fn new_measurement(&self) -> Measurement {
        Measurement {
            sketch_id: self.id,
            z: vec![0.0; self.dims.m1],
        }
    }

    pub fn new_bank(&self, columns: usize) -> MeasurementBank {
        MeasurementBank {
            sketch_id: self.id,
            m1: self.dims.m1,
            width: columns,
            data: vec![0.0; self.dims.m1 * columns],
        }
    }

    /// Wraps externally computed values (e.g. a column of `Z`) as a
    /// measurement of this sketch.
    pub fn measurement_from(&self, z: Vec<f64>) -> Result<Measurement> {
        if z.len() != self.dims.m1 {
            return Err(Error::DimensionMismatch {
                what: "measurement length",
                expected: self.dims.m1,
                found: z.len(),
            });
        }
        Ok(Measurement { sketch_id: self.id, z })
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, len: self.n });
        }
        Ok(())
    }

    fn check_id(&self, found: u64) -> Result<()> {
        if found != self.id {
            return Err(Error::SketchMismatch { expected: self.id, found });
        }
        Ok(())
    }

    /// `(cell, sign)` for every repetition, written into `out` (length `R`).
    fn locate(&self, i: usize, out: &mut [(usize, f64)]) {
        let w = self.dims.width;
        for (r, ((b, s), o)) in self.bucket_hashes.iter().zip(&self.sign_hashes).zip(out.iter_mut()).enumerate() {
            *o = (r * w + b.bucket(i as u64, w), s.sign(i as u64));
        }
    }

    pub fn cells(&self, i: usize) -> Result<Vec<(usize, f64)>> {
        self.check_index(i)?;
        let mut out = vec![(0, 0.0); self.dims.reps];
        self.locate(i, &mut out);
        Ok(out)
    }

    /// `z += Φ e_i · delta`.
    pub fn encode_update(&self, z: &mut Measurement, i: usize, delta: f64) -> Result<()> {
        self.check_id(z.sketch_id)?;
        self.check_index(i)?;
        let mut cells = vec![(0, 0.0); self.dims.reps];
        self.locate(i, &mut cells);
        for (cell, sign) in cells {
            z.z[cell] += sign * delta;
        }
        Ok(())
    }

    /// Applies `encode_update(column c, i, values[c])` to every column of the
    /// bank at once.
    pub fn encode_row(&self, bank: &mut MeasurementBank, i: usize, values: &[f64]) -> Result<()> {
        self.check_id(bank.sketch_id)?;
        self.check_index(i)?;
        if values.len() != bank.width {
            return Err(Error::DimensionMismatch {
                what: "bank row width",
                expected: bank.width,
                found: values.len(),
            });
        }
        let mut cells = vec![(0, 0.0); self.dims.reps];
        self.locate(i, &mut cells);
        let t = bank.width;
        for (cell, sign) in cells {
            let dst = &mut bank.data[cell * t..(cell + 1) * t];
            for (d, &v) in dst.iter_mut().zip(values) {
                *d += sign * v;
            }
        }
        Ok(())
    }

    /// Median-of-repetitions estimate of coordinate `i`.
    pub fn estimate(&self, z: &Measurement, i: usize) -> Result<f64> {
        self.check_id(z.sketch_id)?;
        let cells = self.cells(i)?;
        let mut vals: Vec<f64> = cells.iter().map(|&(c, s)| s * z.z[c]).collect();
        Ok(median(&mut vals))
    }

    pub fn decode_topk(&self, z: &Measurement) -> Result<SparseColumn> {
        Ok(self.decode_many(std::slice::from_ref(z))?.pop().unwrap())
    }

    /// Decodes several measurements of this sketch, sharing hash evaluations.
    /// Sweeps all `n` candidate coordinates.
    pub fn decode_many(&self, zs: &[Measurement]) -> Result<Vec<SparseColumn>> {
        for z in zs {
            self.check_id(z.sketch_id)?;
        }
        let mut candidates: Vec<Vec<(usize, f64)>> = vec![Vec::new(); zs.len()];
        let mut cells = vec![(0, 0.0); self.dims.reps];
        let mut scratch = vec![0.0; self.dims.reps];
        for i in 0..self.n {
            self.locate(i, &mut cells);
            for (z, cand) in zs.iter().zip(candidates.iter_mut()) {
                for (s, &(c, sign)) in scratch.iter_mut().zip(&cells) {
                    *s = sign * z.z[c];
                }
                let est = median(&mut scratch);
                if est != 0.0 {
                    cand.push((i, est));
                }
            }
        }
        let keep = 2 * self.k;
        Ok(candidates.into_iter().map(|c| top_entries(c, keep)).collect())
    }
}

fn by_magnitude_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0))
}

fn top_entries(mut cand: Vec<(usize, f64)>, keep: usize) -> SparseColumn {
    if cand.len() > keep {
        if keep == 0 {
            cand.clear();
        } else {
            cand.select_nth_unstable_by(keep - 1, by_magnitude_then_index);
            cand.truncate(keep);
        }
    }
    cand.sort_unstable_by_key(|e| e.0);
    SparseColumn { entries: cand }
}

/// Median; the mean of the two middle values for even lengths.
pub(crate) fn median(vals: &mut [f64]) -> f64 {
    let n = vals.len();
    let mid = n / 2;
    let (lo, &mut hi, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lower = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lower == hi {
            hi
        } else {
            0.5 * (lower + hi)
        }
    }
}

/// `min over k-sparse y' of ‖y' − y‖₂`: the norm of `y` with its `k`
/// largest-magnitude entries removed.
pub fn tail_norm(y: &[f64], k: usize) -> f64 {
    if k >= y.len() {
        return 0.0;
    }
    let mut sq: Vec<f64> = y.iter().map(|v| v * v).collect();
    if k > 0 {
        sq.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    sq[k..].iter().sum::<f64>().sqrt()
}
