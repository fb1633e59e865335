use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MegaError>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad files, schemas, column names or arguments.
    Input,
    /// Singular matrices, non-convergence, degenerate designs.
    Numerical,
    /// Failures unrelated to the inputs (thread pools, output files).
    Internal,
}

#[derive(Debug, Error)]
pub enum MegaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("no data rows")]
    NoData,

    #[error("schema/header mismatch on column `{0}`")]
    SchemaMismatch(String),

    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{column}` has kind {found}, expected {expected}")]
    WrongKind {
        column: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("clock `{0}` has zero variance")]
    ConstantColumn(String),

    #[error("matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("no common factor under Kaiser criterion (largest eigenvalue {largest:.4})")]
    NoCommonFactor { largest: f64 },

    #[error("expected a single retained factor, found {0}")]
    NotUnifactorial(usize),

    #[error("degenerate normalization: weights sum to {0:.3e}")]
    DegenerateNormalization(f64),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("under-identified model: {0}")]
    UnderIdentified(String),

    #[error("rank-deficient design: column `{0}` is collinear with earlier columns")]
    RankDeficient(String),

    #[error("rank-deficient sample covariance: {0}")]
    RankDeficientCovariance(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty side of the cutoff: {0}")]
    EmptySide(String),

    #[error("mixed periods in rater combination")]
    MixedPeriods,

    #[error("config error: {0}")]
    Config(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl MegaError {
    pub fn class(&self) -> ErrorClass {
        use MegaError::*;
        match self {
            Io { .. }
            | Csv(_)
            | NoData
            | SchemaMismatch(_)
            | DuplicateSubject(_)
            | UnknownColumn(_)
            | WrongKind { .. }
            | InvalidArgument(_)
            | DimensionMismatch(_)
            | UnderIdentified(_)
            | MixedPeriods
            | Config(_) => ErrorClass::Input,
            ConstantColumn(_)
            | IllConditioned { .. }
            | NoCommonFactor { .. }
            | NotUnifactorial(_)
            | DegenerateNormalization(_)
            | NonConvergence(_)
            | RankDeficient(_)
            | RankDeficientCovariance(_)
            | InsufficientData(_)
            | EmptySide(_) => ErrorClass::Numerical,
            Internal(_) => ErrorClass::Internal,
        }
    }
}

impl From<csv::Error> for MegaError {
    fn from(e: csv::Error) -> Self {
        MegaError::Csv(e.to_string())
    }
}
