use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum SlacError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no clinical range defined for feature(s): {0}")]
    MissingRange(String),

    #[error("feature {0} has no observations in the fitting cohort")]
    UnfittedFeature(String),

    #[error("static column {0} has no observed values")]
    EmptyStaticColumn(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("non-finite {what} in tensor {tensor}")]
    NonFinite { what: String, tensor: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("clustering error: {0}")]
    Cluster(String),

    #[error("episode {0} has an empty triplet set")]
    EmptyEpisode(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("too few forecast instances: {0} (need at least 2)")]
    TooFewInstances(usize),

    #[error("training diverged at {0}: loss is not finite")]
    Diverged(String),

    #[error("fold plan error: {0}")]
    FoldPlan(String),

    #[error("cohort mismatch: {0}")]
    CohortMismatch(String),

    #[error("stale or incompatible weights: {0}")]
    StaleWeights(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SlacError>;
