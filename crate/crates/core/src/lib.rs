//! Scoring, agreement statistics, calibration and reporting for panels of
//! LLM judges compared against human reference panels.

pub mod analysis;
pub mod calibration;
pub mod error;
pub mod jury;
pub mod metrics;
pub mod model;
pub mod report;
pub mod resampling;
pub mod synth;

pub use error::{DataError, JudgeError, PipelineError, StatsError};
pub use model::{
    EvaluationRecord, EvaluatorId, EvaluatorKind, PairedScore, RepetitionFilter, ScoreDimension, ScoreVector,
    Split,
};
