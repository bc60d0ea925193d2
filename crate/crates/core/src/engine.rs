//! One-pass streaming attention engine.
//!
//! Plain mode reads `V`, then `K`, then `Q`, each row by row and in index
//! order. Cross mode reads `X2` (producing `K` and `V` rows through stored
//! weights) and then `X1` (producing `Q` rows). The engine keeps four sketch
//! objects and nothing whose size depends on `n`:
//!
//! * `sk_v = ΨV` (`m2 × d`)
//! * `sk_u2 = ΨU2` (`m2 × t`)
//! * `sk_dinv_u1 = ΦD̃⁻¹U1` (`m1 × t`)
//! * `prod_u2 = U2ᵀ1_n` (`t`)
//!
//! `finalize` forms `Z = sk_dinv_u1 · (sk_u2ᵀ · sk_v)` and decodes each of its
//! `d` columns with the recovery sketch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{dot, fill_feature_row, FeatureConfig};
use crate::linalg;
use crate::recovery::{
    recovery_dims_with, MeasurementBank, RecoveryConstants, RecoveryDims, RecoverySketch, SparseColumn,
};
use crate::sketch::{jl_dim_with, ColumnSketch, SketchAccumulator, SketchKind, Sketcher, JL_CONSTANT};
use crate::tensor::{DenseMatrix, ProblemParams, RngSeed};

const PSI_STREAM: u64 = 1;
const PHI_STREAM: u64 = 2;

/// Number of key rows staged before their rank-one updates are applied to
/// `sk_u2` as one block product.
pub const DEFAULT_K_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AwaitV,
    AwaitK,
    AwaitQ,
    AwaitX2,
    AwaitX1,
    Finalized,
}

/// Which matrix a streamed row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    V,
    K,
    Q,
    X2,
    X1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchDims {
    pub n: usize,
    pub d: usize,
    pub t: usize,
    pub m2: usize,
    pub recovery: RecoveryDims,
}

impl SketchDims {
    pub fn m1(&self) -> usize {
        self.recovery.m1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub params: ProblemParams,
    pub features: FeatureConfig,
    pub sketch: SketchKind,
    pub seed: RngSeed,
    pub jl_constant: f64,
    /// Union-bound count in the `m2` formula; defaults to `n·d`.
    pub union_count: Option<u64>,
    pub recovery_constants: RecoveryConstants,
    pub m2_override: Option<usize>,
    pub recovery_override: Option<RecoveryDims>,
    pub k_block: usize,
}

impl EngineConfig {
    pub fn new(params: ProblemParams, features: FeatureConfig, seed: RngSeed) -> Self {
        EngineConfig {
            params,
            features,
            sketch: SketchKind::Ams,
            seed,
            jl_constant: JL_CONSTANT,
            union_count: None,
            recovery_constants: RecoveryConstants::default(),
            m2_override: None,
            recovery_override: None,
            k_block: DEFAULT_K_BLOCK,
        }
    }

    pub fn with_sketch(mut self, kind: SketchKind) -> Self {
        self.sketch = kind;
        self
    }

    pub fn with_k_block(mut self, block: usize) -> Self {
        self.k_block = block;
        self
    }

    /// Pins `m2` and the recovery dimensions instead of deriving them from
    /// `(n, d, k, ε1, ε2, δ)`.
    pub fn with_dims(mut self, m2: usize, recovery: RecoveryDims) -> Self {
        self.m2_override = Some(m2);
        self.recovery_override = Some(recovery);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.features.d() != self.params.d {
            return Err(Error::DimensionMismatch {
                what: "feature dimension vs head dimension",
                expected: self.params.d,
                found: self.features.d(),
            });
        }
        if !(self.jl_constant > 0.0 && self.jl_constant.is_finite()) {
            return Err(Error::InvalidParam(format!("JL constant must be positive, got {}", self.jl_constant)));
        }
        if !(self.recovery_constants.reps > 0.0 && self.recovery_constants.width > 0.0) {
            return Err(Error::InvalidParam("recovery constants must be positive".into()));
        }
        if self.m2_override == Some(0) {
            return Err(Error::InvalidParam("m2 must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<SketchDims> {
        self.validate()?;
        let p = &self.params;
        let union = self.union_count.unwrap_or((p.n as u64).saturating_mul(p.d as u64));
        let m2 = self
            .m2_override
            .unwrap_or_else(|| jl_dim_with(self.jl_constant, p.eps2, p.delta, union));
        let recovery = self
            .recovery_override
            .map(|r| RecoveryDims::new(r.reps, r.width))
            .unwrap_or_else(|| recovery_dims_with(self.recovery_constants, p.k, p.eps1, p.n));
        Ok(SketchDims {
            n: p.n,
            d: p.d,
            t: self.features.width(),
            m2,
            recovery,
        })
    }

    /// The JL sketch `Ψ` an engine with this configuration uses.
    pub fn value_sketcher(&self) -> Result<Sketcher> {
        let dims = self.dims()?;
        Ok(Sketcher::new(self.sketch, dims.m2, dims.n, self.seed.derive(PSI_STREAM)))
    }

    /// The recovery sketch `Φ` an engine with this configuration uses.
    pub fn recovery_sketch(&self) -> Result<RecoverySketch> {
        let dims = self.dims()?;
        let p = &self.params;
        RecoverySketch::with_dims(p.k, p.eps1, p.n, dims.recovery, self.seed.derive(PHI_STREAM))
    }
}

/// Stored `d × d` projections for cross attention: `Q = X1·W_Q`,
/// `K = X2·W_K`, `V = X2·W_V`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossWeights {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

impl CrossWeights {
    pub fn new(w_q: DenseMatrix, w_k: DenseMatrix, w_v: DenseMatrix) -> Result<Self> {
        let d = w_q.rows();
        for w in [&w_q, &w_k, &w_v] {
            if w.rows() != d || w.cols() != d {
                return Err(Error::DimensionMismatch {
                    what: "cross weight matrix must be d x d",
                    expected: d,
                    found: if w.rows() != d { w.rows() } else { w.cols() },
                });
            }
        }
        Ok(CrossWeights { w_q, w_k, w_v })
    }

    pub fn identity(d: usize) -> Self {
        CrossWeights {
            w_q: DenseMatrix::identity(d),
            w_k: DenseMatrix::identity(d),
            w_v: DenseMatrix::identity(d),
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCounters {
    pub v: usize,
    pub k: usize,
    pub q: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDiagnostics {
    pub column: usize,
    pub nnz: usize,
    /// `‖Z_{*,column}‖₂`.
    pub measurement_norm: f64,
}

/// Decoded output `T`, one sparse column per head dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub n: usize,
    pub columns: Vec<SparseColumn>,
    pub diagnostics: Vec<ColumnDiagnostics>,
}

impl AttentionOutput {
    pub fn to_dense(&self) -> DenseMatrix {
        let d = self.columns.len();
        let mut data = vec![0.0; self.n * d];
        for (c, col) in self.columns.iter().enumerate() {
            for &(i, v) in col.entries() {
                data[i * d + c] = v;
            }
        }
        DenseMatrix::from_vec(self.n, d, data).expect("decoded values are finite")
    }
}

/// Whether a buffer belongs to the sketch state proper or is a fixed-size
/// working area.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferRole {
    Sketch,
    Working,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: BufferRole,
    /// Numbers actually allocated.
    pub numbers: usize,
}

/// Staged key rows awaiting a block update of `sk_u2`.
#[derive(Debug)]
struct KeyStage {
    capacity: usize,
    len: usize,
    /// `capacity × m2`: sketch column of each staged row.
    psi: Vec<f64>,
    /// `capacity × t`: staged feature rows.
    rows: Vec<f64>,
}

/// The engine's entire memory.
#[derive(Debug)]
pub struct SketchState {
    dims: SketchDims,
    features: FeatureConfig,
    psi: Sketcher,
    phi: RecoverySketch,
    sk_v: SketchAccumulator,
    sk_u2: SketchAccumulator,
    sk_dinv_u1: MeasurementBank,
    prod_u2: Vec<f64>,
    phase: Phase,
    counters: RowCounters,
    weights: Option<CrossWeights>,
    stage: Option<KeyStage>,
    feature_buf: Vec<f64>,
    column_buf: Vec<f64>,
}

impl SketchState {
    /// Plain mode: expects `V`, then `K`, then `Q`.
    pub fn new(cfg: &EngineConfig) -> Result<Self> {
        Self::build(cfg, None)
    }

    /// Cross mode: expects `X2`, then `X1`.
    pub fn new_cross(cfg: &EngineConfig, weights: CrossWeights) -> Result<Self> {
        if weights.d() != cfg.params.d {
            return Err(Error::DimensionMismatch {
                what: "cross weight dimension",
                expected: cfg.params.d,
                found: weights.d(),
            });
        }
        Self::build(cfg, Some(weights))
    }

    fn build(cfg: &EngineConfig, weights: Option<CrossWeights>) -> Result<Self> {
        let dims = cfg.dims()?;
        let psi = cfg.value_sketcher()?;
        let phi = cfg.recovery_sketch()?;
        let stage = (cfg.k_block > 1).then(|| KeyStage {
            capacity: cfg.k_block,
            len: 0,
            psi: vec![0.0; cfg.k_block * dims.m2],
            rows: vec![0.0; cfg.k_block * dims.t],
        });
        let phase = if weights.is_some() { Phase::AwaitX2 } else { Phase::AwaitV };
        Ok(SketchState {
            sk_v: SketchAccumulator::new(dims.m2, dims.d),
            sk_u2: SketchAccumulator::new(dims.m2, dims.t),
            sk_dinv_u1: phi.new_bank(dims.t),
            prod_u2: vec![0.0; dims.t],
            feature_buf: vec![0.0; dims.t],
            column_buf: vec![0.0; dims.m2],
            dims,
            features: cfg.features,
            psi,
            phi,
            phase,
            counters: RowCounters::default(),
            weights,
            stage,
        })
    }

    pub fn dims(&self) -> SketchDims {
        self.dims
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn counters(&self) -> RowCounters {
        self.counters
    }

    pub fn is_cross(&self) -> bool {
        self.weights.is_some()
    }

    pub fn psi(&self) -> &Sketcher {
        &self.psi
    }

    pub fn recovery_sketch(&self) -> &RecoverySketch {
        &self.phi
    }

    pub fn sk_v(&self) -> &SketchAccumulator {
        &self.sk_v
    }

    pub fn sk_u2(&self) -> &SketchAccumulator {
        &self.sk_u2
    }

    pub fn sk_dinv_u1(&self) -> &MeasurementBank {
        &self.sk_dinv_u1
    }

    pub fn prod_u2(&self) -> &[f64] {
        &self.prod_u2
    }

    /// Every allocated buffer with its shape.
    pub fn buffer_shapes(&self) -> Vec<BufferShape> {
        let d = &self.dims;
        let mut out = vec![
            BufferShape {
                name: "sk_u2".into(),
                rows: d.m2,
                cols: d.t,
                role: BufferRole::Sketch,
                numbers: self.sk_u2.numbers(),
            },
            BufferShape {
                name: "sk_v".into(),
                rows: d.m2,
                cols: d.d,
                role: BufferRole::Sketch,
                numbers: self.sk_v.numbers(),
            },
            BufferShape {
                name: "sk_dinv_u1".into(),
                rows: d.m1(),
                cols: d.t,
                role: BufferRole::Sketch,
                numbers: self.sk_dinv_u1.numbers(),
            },
            BufferShape {
                name: "prod_u2".into(),
                rows: d.t,
                cols: 1,
                role: BufferRole::Sketch,
                numbers: self.prod_u2.len(),
            },
            BufferShape {
                name: "feature_row".into(),
                rows: d.t,
                cols: 1,
                role: BufferRole::Working,
                numbers: self.feature_buf.len(),
            },
            BufferShape {
                name: "sketch_column".into(),
                rows: d.m2,
                cols: 1,
                role: BufferRole::Working,
                numbers: self.column_buf.len(),
            },
        ];
        if let Some(stage) = &self.stage {
            out.push(BufferShape {
                name: "key_stage_rows".into(),
                rows: stage.capacity,
                cols: d.t,
                role: BufferRole::Working,
                numbers: stage.rows.len(),
            });
            out.push(BufferShape {
                name: "key_stage_columns".into(),
                rows: stage.capacity,
                cols: d.m2,
                role: BufferRole::Working,
                numbers: stage.psi.len(),
            });
        }
        if let Some(w) = &self.weights {
            for (name, m) in [("w_q", &w.w_q), ("w_k", &w.w_k), ("w_v", &w.w_v)] {
                out.push(BufferShape {
                    name: name.into(),
                    rows: m.rows(),
                    cols: m.cols(),
                    role: BufferRole::Sketch,
                    numbers: m.data().len(),
                });
            }
        }
        out
    }

    /// Hash coefficients and seeds needed to regenerate `Ψ` and `Φ`.
    pub fn hash_seed_words(&self) -> usize {
        self.psi.seed_words() + self.phi.hash_words()
    }

    fn expect_phase(&self, op: &'static str, want: Phase) -> Result<()> {
        if self.phase == Phase::Finalized {
            return Err(Error::AlreadyFinalized);
        }
        if self.phase != want {
            return Err(Error::OutOfPhase { op, phase: self.phase });
        }
        Ok(())
    }

    fn expect_row(&self, seen: usize, i: usize, row: &[f64]) -> Result<()> {
        if seen == self.dims.n {
            return Err(Error::IndexOutOfRange { index: i, len: self.dims.n });
        }
        if i != seen {
            return Err(Error::OutOfOrder { expected: seen, got: i });
        }
        if row.len() != self.dims.d {
            return Err(Error::DimensionMismatch {
                what: "streamed row length",
                expected: self.dims.d,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("row {i} contains a non-finite value")));
        }
        Ok(())
    }

    fn apply_v(&mut self, i: usize, v_row: &[f64]) -> Result<()> {
        self.psi.fill_column(i, &mut self.column_buf)?;
        self.sk_v.add_outer(&self.column_buf, v_row);
        Ok(())
    }

    fn apply_k(&mut self, i: usize, k_row: &[f64]) -> Result<()> {
        let t = self.dims.t;
        let m2 = self.dims.m2;
        match &mut self.stage {
            Some(stage) => {
                let slot = stage.len;
                let feat = &mut stage.rows[slot * t..(slot + 1) * t];
                fill_feature_row(k_row, &self.features, feat)?;
                for (p, f) in self.prod_u2.iter_mut().zip(feat.iter()) {
                    *p += f;
                }
                self.psi.fill_column(i, &mut stage.psi[slot * m2..(slot + 1) * m2])?;
                stage.len += 1;
                if stage.len == stage.capacity {
                    self.flush_keys()?;
                }
            }
            None => {
                fill_feature_row(k_row, &self.features, &mut self.feature_buf)?;
                for (p, f) in self.prod_u2.iter_mut().zip(&self.feature_buf) {
                    *p += f;
                }
                self.psi.fill_column(i, &mut self.column_buf)?;
                self.sk_u2.add_outer(&self.column_buf, &self.feature_buf);
            }
        }
        Ok(())
    }

    fn flush_keys(&mut self) -> Result<()> {
        if let Some(stage) = &mut self.stage {
            let b = stage.len;
            if b > 0 {
                self.sk_u2.add_block(
                    &stage.psi[..b * self.dims.m2],
                    &stage.rows[..b * self.dims.t],
                    b,
                )?;
                stage.len = 0;
            }
        }
        Ok(())
    }

    fn apply_q(&mut self, i: usize, q_row: &[f64]) -> Result<()> {
        fill_feature_row(q_row, &self.features, &mut self.feature_buf)?;
        let d_tilde = dot(&self.feature_buf, &self.prod_u2);
        if !(d_tilde > 0.0 && d_tilde.is_finite()) {
            return Err(Error::KernelPositivity { row: i, value: d_tilde });
        }
        for f in &mut self.feature_buf {
            *f /= d_tilde;
        }
        self.phi.encode_row(&mut self.sk_dinv_u1, i, &self.feature_buf)
    }

    pub fn ingest_v_row(&mut self, i: usize, v_row: &[f64]) -> Result<()> {
        self.expect_phase("ingest_v_row", Phase::AwaitV)?;
        self.expect_row(self.counters.v, i, v_row)?;
        self.apply_v(i, v_row)?;
        self.counters.v += 1;
        if self.counters.v == self.dims.n {
            self.phase = Phase::AwaitK;
        }
        Ok(())
    }

    pub fn ingest_k_row(&mut self, i: usize, k_row: &[f64]) -> Result<()> {
        self.expect_phase("ingest_k_row", Phase::AwaitK)?;
        self.expect_row(self.counters.k, i, k_row)?;
        self.apply_k(i, k_row)?;
        self.counters.k += 1;
        if self.counters.k == self.dims.n {
            self.flush_keys()?;
            self.phase = Phase::AwaitQ;
        }
        Ok(())
    }

    pub fn ingest_q_row(&mut self, i: usize, q_row: &[f64]) -> Result<()> {
        self.expect_phase("ingest_q_row", Phase::AwaitQ)?;
        self.expect_row(self.counters.q, i, q_row)?;
        self.apply_q(i, q_row)?;
        self.counters.q += 1;
        Ok(())
    }

    /// Reads one row of `X2`: one pass yields the `K` row `x2·W_K` and the
    /// `V` row `x2·W_V`.
    pub fn ingest_x2_row(&mut self, i: usize, x2_row: &[f64]) -> Result<()> {
        self.expect_phase("ingest_x2_row", Phase::AwaitX2)?;
        self.expect_row(self.counters.k, i, x2_row)?;
        let w = self.weights.as_ref().expect("cross phase implies weights");
        let k_row = w.w_k.row_times(x2_row)?;
        let v_row = w.w_v.row_times(x2_row)?;
        self.apply_v(i, &v_row)?;
        self.apply_k(i, &k_row)?;
        self.counters.v += 1;
        self.counters.k += 1;
        if self.counters.k == self.dims.n {
            self.flush_keys()?;
            self.phase = Phase::AwaitX1;
        }
        Ok(())
    }

    /// Reads one row of `X1` and processes the `Q` row `x1·W_Q`.
    pub fn ingest_x1_row(&mut self, i: usize, x1_row: &[f64]) -> Result<()> {
        self.expect_phase("ingest_x1_row", Phase::AwaitX1)?;
        self.expect_row(self.counters.q, i, x1_row)?;
        let q_row = self.weights.as_ref().expect("cross phase implies weights").w_q.row_times(x1_row)?;
        self.apply_q(i, &q_row)?;
        self.counters.q += 1;
        Ok(())
    }

    pub fn ingest(&mut self, kind: RowKind, i: usize, row: &[f64]) -> Result<()> {
        match kind {
            RowKind::V => self.ingest_v_row(i, row),
            RowKind::K => self.ingest_k_row(i, row),
            RowKind::Q => self.ingest_q_row(i, row),
            RowKind::X2 => self.ingest_x2_row(i, row),
            RowKind::X1 => self.ingest_x1_row(i, row),
        }
    }

    fn ready_to_finalize(&self) -> Result<()> {
        match self.phase {
            Phase::Finalized => Err(Error::AlreadyFinalized),
            Phase::AwaitQ | Phase::AwaitX1 if self.counters.q == self.dims.n => Ok(()),
            phase => Err(Error::OutOfPhase { op: "finalize", phase }),
        }
    }

    /// `Z = sk_dinv_u1 · sk_u2ᵀ · sk_v` as an `m1 × d` matrix, evaluated as
    /// `sk_dinv_u1 · (sk_u2ᵀ · sk_v)`.
    pub fn measurement_matrix(&self) -> Result<DenseMatrix> {
        self.ready_to_finalize()?;
        let SketchDims { t, m2, d, .. } = self.dims;
        let m1 = self.dims.m1();
        let inner = linalg::gemm_at_b(m2, t, d, self.sk_u2.buffer(), self.sk_v.buffer());
        let mut z = vec![0.0; m1 * d];
        linalg::gemm_acc(m1, t, d, self.sk_dinv_u1.data(), &inner, &mut z);
        DenseMatrix::from_vec(m1, d, z)
    }

    /// Forms `Z` and runs sparse recovery on each of its columns.
    pub fn finalize(&mut self) -> Result<AttentionOutput> {
        let z = self.measurement_matrix()?;
        let measurements = (0..self.dims.d)
            .map(|c| self.phi.measurement_from(z.column(c)))
            .collect::<Result<Vec<_>>>()?;
        let columns = self.phi.decode_many(&measurements)?;
        let diagnostics = columns
            .iter()
            .zip(&measurements)
            .enumerate()
            .map(|(column, (col, m))| ColumnDiagnostics {
                column,
                nnz: col.nnz(),
                measurement_norm: m.values().iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
            .collect();
        self.phase = Phase::Finalized;
        Ok(AttentionOutput {
            n: self.dims.n,
            columns,
            diagnostics,
        })
    }

    /// Streams in-memory `Q`, `K`, `V` in the plain-mode order.
    pub fn stream_plain(&mut self, q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<()> {
        for (i, row) in v.iter_rows().enumerate() {
            self.ingest_v_row(i, row)?;
        }
        for (i, row) in k.iter_rows().enumerate() {
            self.ingest_k_row(i, row)?;
        }
        for (i, row) in q.iter_rows().enumerate() {
            self.ingest_q_row(i, row)?;
        }
        Ok(())
    }

    /// Streams in-memory `X1`, `X2` in the cross-mode order.
    pub fn stream_cross(&mut self, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<()> {
        for (i, row) in x2.iter_rows().enumerate() {
            self.ingest_x2_row(i, row)?;
        }
        for (i, row) in x1.iter_rows().enumerate() {
            self.ingest_x1_row(i, row)?;
        }
        Ok(())
    }
}

/// Runs the plain-mode algorithm end to end on in-memory matrices.
pub fn approximate_attention(
    cfg: &EngineConfig,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<AttentionOutput> {
    let mut st = SketchState::new(cfg)?;
    st.stream_plain(q, k, v)?;
    st.finalize()
}
