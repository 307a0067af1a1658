//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while recording or differentiating a [`crate::tape::Tape`].
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in `{op}`: lhs {lhs_rows}x{lhs_cols}, rhs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("`{op}` requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("`{op}` out of bounds: window {row0}+{rows}x{col0}+{cols} on {src_rows}x{src_cols}")]
    SliceOutOfBounds {
        op: &'static str,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
        src_rows: usize,
        src_cols: usize,
    },
    #[error("backward requires a scalar (1x1) output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("matrix inversion failed in `{op}` (numerically singular)")]
    SingularMatrix { op: &'static str },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

/// Errors from manifold geometry kernels.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("matrix is not orthonormal: ||Y^T Y - I||_F = {residual:.3e} exceeds {tolerance:.1e}")]
    NotOrthonormal { residual: f64, tolerance: f64 },
    #[error("vector is not horizontal: ||Y^T xi||_F = {residual:.3e} exceeds {tolerance:.1e}")]
    NotHorizontal { residual: f64, tolerance: f64 },
    #[error("invalid dimensions: require 1 <= k < D, got D={dims}, k={k}")]
    InvalidDims { dims: usize, k: usize },
    #[error("chart singularity: cond(I + Y^T X) = {cond:.3e} exceeds 1e12")]
    ChartSingular { cond: f64 },
    #[error("rank deficiency at column {col}: pivot norm {pivot:.3e} below 1e-12")]
    RankDeficient { col: usize, pivot: f64 },
    #[error("internal error: {0}")]
    Internal(String),
}

/// Errors from the prior distribution.
#[derive(Debug, Error)]
pub enum PriorError {
    #[error("covariance is not positive-definite ({which})")]
    NotPositiveDefinite { which: &'static str },
    #[error("degenerate covariance: log-density undefined for sigma = 0")]
    DegenerateCovariance,
    #[error("domain error: require 1 <= k < D for Gr(k,D), got k={k}, D={dims}")]
    Domain { k: usize, dims: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Errors from vector-field evaluation.
#[derive(Debug, Error)]
pub enum FieldError {
    #[error("empty layer widths")]
    EmptyWidths,
    #[error("layer widths must end in 1 (scalar potential), got {0}")]
    BadFinalWidth(usize),
    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Errors from flow integration and log-density evaluation.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("maximum step count {0} exceeded")]
    MaxSteps(usize),
    #[error("step size underflow: |h| = {0:.3e} < 1e-12")]
    StepUnderflow(f64),
    #[error("invalid solver config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Errors from dataset generation and CSV ingestion.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset name `{0}` (valid: 2spirals, swissroll, 2circles, 2sines, target, csv)")]
    UnknownName(String),
    #[error("dataset requires n > 0")]
    EmptySpec,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line} of {path}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("rank-deficient sample at row {row}: {source}")]
    RankDeficient {
        row: usize,
        #[source]
        source: GeometryError,
    },
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
    #[error("cannot split an empty batch")]
    EmptySplit,
}

/// Errors from the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at batch sample {sample}")]
    NonFiniteLoss { sample: usize },
    #[error("training diverged: NLL {nll:.4} above guard {guard:.4} for 3 consecutive epochs")]
    Diverged { nll: f64, guard: f64 },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Data(#[from] DataError),
}
