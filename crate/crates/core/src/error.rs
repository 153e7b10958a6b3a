//! Error taxonomy shared by every module.
//!
//! Variant names double as the machine-readable identifiers printed by the
//! CLI, so renaming one is a breaking change.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("schema violation at row {row}: {message}")]
    SchemaViolation { row: usize, message: String },

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("zero count for event {event}{context}")]
    ZeroCount { event: String, context: String },

    #[error("empty training set for target {0}")]
    EmptyTraining(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("irrelevant RSV: |denominator| = {denominator:e} below tolerance {tolerance:e}{context}")]
    IrrelevantRsv {
        denominator: f64,
        tolerance: f64,
        context: String,
    },

    #[error("degenerate bootstrap: {failed} of {total} replicates failed")]
    DegenerateBootstrap { failed: usize, total: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("outcome {value} outside support [{lo}, {hi}]")]
    OutOfSupport { value: f64, lo: f64, hi: f64 },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("support too large: {size} points exceeds {limit}")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("weak instrument: |beta(1) - beta(0)| = {gap} below floor {floor}")]
    WeakInstrument { gap: f64, floor: f64 },

    #[error("insufficient cell {cell}: {count} units")]
    InsufficientCell { cell: String, count: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Identification,
}

impl Error {
    /// Stable identifier, e.g. `"IrrelevantRSV"`.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::SchemaViolation { .. } => "SchemaViolation",
            Error::EmptySample(_) => "EmptySample",
            Error::InfeasibleSplit(_) => "InfeasibleSplit",
            Error::ZeroCount { .. } => "ZeroCount",
            Error::EmptyTraining(_) => "EmptyTraining",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::SingularDesign(_) => "SingularDesign",
            Error::IrrelevantRsv { .. } => "IrrelevantRSV",
            Error::DegenerateBootstrap { .. } => "DegenerateBootstrap",
            Error::Unsupported(_) => "Unsupported",
            Error::OutOfSupport { .. } => "OutOfSupport",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::SupportTooLarge { .. } => "SupportTooLarge",
            Error::WeakInstrument { .. } => "WeakInstrument",
            Error::InsufficientCell { .. } => "InsufficientCell",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::ZeroCount { .. }
            | Error::SingularDesign(_)
            | Error::IrrelevantRsv { .. }
            | Error::DegenerateBootstrap { .. }
            | Error::WeakInstrument { .. } => ErrorClass::Identification,
            _ => ErrorClass::Data,
        }
    }

    /// Appends fold/stratum context to errors that carry a context slot.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::ZeroCount { event, context } => Error::ZeroCount {
                event,
                context: format!("{context} [{ctx}]"),
            },
            Error::IrrelevantRsv {
                denominator,
                tolerance,
                context,
            } => Error::IrrelevantRsv {
                denominator,
                tolerance,
                context: format!("{context} [{ctx}]"),
            },
            Error::SingularDesign(m) => Error::SingularDesign(format!("{m} [{ctx}]")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
