use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants group into families that the CLI maps onto distinct exit codes:
/// input validation, lookup failures, generation, sampling, training,
/// search budgets, metrics, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate descriptor: {0}")]
    DegenerateDescriptor(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("world generation failed: {0}")]
    GenerationFailure(String),

    #[error("insufficient members: {0}")]
    InsufficientMembers(String),

    #[error("insufficient classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("infeasible scene {scene}: {reason}")]
    InfeasibleScene { scene: u64, reason: String },

    #[error("iteration composition error: {0}")]
    Composition(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDivergence { iteration: usize, reason: String },

    #[error("memory budget infeasible: budget {budget} bytes, minimum {minimum} bytes")]
    BudgetInfeasible { budget: u64, minimum: u64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: expected {expected} bytes, found {actual} (payload ends at byte offset {actual})")]
    Corruption {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("ingestion error in {path}:\n{}", issues.join("\n"))]
    Ingestion { path: PathBuf, issues: Vec<String> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
