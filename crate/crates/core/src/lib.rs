//! Weight-space model merging with singular value calibration.
//!
//! Task updates `ΔW_i = W_i - W_pre` are combined by a base merge (sum,
//! average, TIES, DARE). The merged update is then decomposed per layer and
//! each singular value is shrunk (or, with `α < 1`, boosted) according to how
//! much the tasks' responses along that singular direction over-count each
//! other, leaving the singular directions untouched.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod rng;
pub mod spectral;
pub mod svc;

pub use checkpoint::{
    compute_deltas, load_checkpoint, write_checkpoint, DType, DeltaStore, DeltaTensor, Tensor,
    TensorData, TensorStore,
};
pub use error::{Error, ErrorClass, Result};
pub use linalg::{reconstruct, svd, Matrix, SpectralDecomposition};
pub use merge::{
    assemble_weights, merge_average, merge_dare, merge_store, merge_sum, merge_ties, DareBase,
    MergeMethod, MergedDelta,
};
pub use spectral::{gap_report, AnalysisOptions, Basis, SubspaceOverlapReport, Tolerances};
pub use svc::{
    calibrate_matrix, calibrate_store, calibrate_vector, calibration_factor, CalibrationConfig,
    CalibrationMode, CalibrationResult, ParamFilter,
};
