//! Judge prompts, provider calls, reply parsing and jury aggregation.

pub mod aggregate;
pub mod parse;
pub mod prompt;
pub mod runner;
pub mod stub;

pub use aggregate::aggregate_jury;
pub use parse::parse_scores;
pub use prompt::{build_prompt, JudgePrompt, DEFAULT_TEMPLATE};
pub use runner::{
    build_prompts, read_audit_log, read_tasks, run_judge, stability_run, AuditEntry, FailureRecord,
    JobKey, JudgeEndpoint, JudgeRunOutput, JudgeTask, JuryRunSpec, ProviderApi,
};
