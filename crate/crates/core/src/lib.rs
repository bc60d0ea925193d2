//! One-pass, sublinear-memory approximation of softmax attention.
//!
//! Rows of `V`, `K` and `Q` are streamed once. Polynomial features turn the
//! exponential kernel into a low-rank product, a JL sketch compresses the
//! value path and a count-sketch measurement of every output column is decoded
//! into a sparse approximation at the end. An exact `n × n` oracle, a seeded
//! instance generator and error/memory reports support verification.

pub mod engine;
pub mod error;
pub mod features;
pub mod framing;
pub mod generate;
pub mod hash;
mod linalg;
pub mod matf;
pub mod oracle;
pub mod recovery;
pub mod report;
pub mod sketch;
pub mod tensor;

pub use engine::{
    approximate_attention, AttentionOutput, CrossWeights, EngineConfig, Phase, RowKind, SketchDims, SketchState,
};
pub use error::{Error, Result};
pub use features::{build_feature_row, kernel_error_bound, FeatureConfig, FeatureRow};
pub use generate::{gen_instance, Instance, Profile};
pub use matf::{mat_load, mat_store};
pub use oracle::{exact_attention, OracleResult};
pub use recovery::{recovery_dims, Measurement, RecoverySketch, SparseColumn};
pub use report::{evaluate, memory_audit, ErrorReport, MemoryReport};
pub use sketch::{jl_dim, AmsSketcher, GaussianSketcher, SketchAccumulator, SketchKind, Sketcher};
pub use tensor::{spectral_norm_upper, DenseMatrix, ProblemParams, RngSeed};
