use std::path::PathBuf;

use thiserror::Error;

use crate::model::ScoreDimension;

/// Errors raised while reading or validating evaluation records.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion {
        line: usize,
        found: String,
        expected: String,
    },
    #[error("case {case_id}: {dimension} score {value} is invalid ({reason})")]
    Score {
        case_id: String,
        dimension: ScoreDimension,
        value: f64,
        reason: &'static str,
    },
    #[error("negative treatment risk {0} is outside 1..=5")]
    Risk(f64),
    #[error("invalid evaluator: {0}")]
    Evaluator(String),
    #[error("ward_agreement set on a non primary-panel record (case {case_id}, agent {agent_id})")]
    WardAgreement { case_id: String, agent_id: String },
    #[error("duplicate record for case {case_id}, agent {agent_id}, evaluator {evaluator}, repetition {repetition}")]
    Duplicate {
        case_id: String,
        agent_id: String,
        evaluator: String,
        repetition: u32,
    },
    #[error("no paired observations for {reference} vs {other} on {dimension}")]
    EmptySample {
        reference: String,
        other: String,
        dimension: ScoreDimension,
    },
    #[error("missing score coverage: {0}")]
    Coverage(String),
}

/// Errors raised by the statistical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("correlation undefined: a column is constant")]
    ConstantColumn,
    #[error("kappa undefined: expected disagreement is zero")]
    DegenerateAgreement,
    #[error("value {0} outside the 1..=5 score range")]
    OutOfRange(f64),
    #[error("mean must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("invalid counts: k={k}, n={n}")]
    InvalidCounts { k: u64, n: u64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{skipped} of {total} bootstrap resamples were undefined (limit 10%)")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("optimisation did not converge: {0}")]
    NotConverged(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("linear algebra failure: {0}")]
    Singular(String),
}

/// Errors raised while building prompts, calling judges or parsing replies.
#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("template is missing placeholder {0}")]
    MissingPlaceholder(String),
    #[error("reference case {reference} does not match tested case {tested}")]
    CaseMismatch { reference: String, tested: String },
    #[error("empty primary diagnosis for case {case_id}, agent {agent_id}")]
    EmptyPrimary { case_id: String, agent_id: String },
    #[error("score block missing {0}")]
    MissingDimension(&'static str),
    #[error("{label} value {value:?} is not an integer in 1..=5")]
    Range { label: &'static str, value: String },
    #[error("no score block found in response")]
    NoScoreBlock,
    #[error("invalid run spec: {0}")]
    Spec(String),
    #[error("auth failure for judge {judge}: {message}")]
    Auth { judge: String, message: String },
    #[error("http error: {0}")]
    Http(String),
    #[error("audit log error: {0}")]
    Audit(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Error raised by the report pipeline, tagged with the stage that failed.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("output error on {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn stage<E>(stage: &'static str) -> impl FnOnce(E) -> Self
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        move |e| PipelineError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}
