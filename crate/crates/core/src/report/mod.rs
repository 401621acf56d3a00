//! End-to-end report: configuration, tables and the output bundle.

mod config;
mod emit;
mod pipeline;
mod table;

pub use config::{
    BootstrapSection, CalibrationSection, JudgeStage, OutputSection, RankingSection, ReportConfig, Section, TableFormat,
    CONFIG_SCHEMA_VERSION,
};
pub use emit::{render_report, write_bundle};
pub use pipeline::{offset_table, run_pipeline, run_pipeline_from, BootstrapMeta, Metadata, ReportBundle, DECISIONS};
pub use table::{Cell, Provenance, Table};
